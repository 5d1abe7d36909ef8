//! Interleaved sequence construction: image patches, prompt text, bracketed
//! latent slot groups, and answer tokens, with per-position segment labels.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::microworld::raster::N_PATCHES;
use crate::microworld::scene::SceneRecord;
use crate::tokenizer::{
    quantize_tenths, render_tenths, TokenId, Vocabulary, TOK_ANSWER_OPEN, TOK_BOS,
    TOK_LATENT_END_3D, TOK_LATENT_END_WM, TOK_LATENT_START_3D, TOK_LATENT_START_WM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Img,
    Txt,
    Wm,
    Geo,
    Act,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionKind {
    /// Image patch row index into the patch matrix.
    Patch(usize),
    /// Discrete token.
    Token(TokenId),
    /// Continuous dynamics slot (group, index within group).
    WmSlot(usize, usize),
    /// Continuous geometry slot.
    GeoSlot(usize),
}

/// Resolved positional structure of one sequence.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub kinds: Vec<PositionKind>,
    pub segments: Vec<Segment>,
    pub img: Range<usize>,
    pub txt: Range<usize>,
    pub wm: Range<usize>,
    pub geo: Range<usize>,
    pub act: Range<usize>,
    pub wm_slots: Vec<usize>,
    pub geo_slots: Vec<usize>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn segment_of(&self, pos: usize) -> Segment {
        self.segments[pos]
    }

    /// Discrete-token positions (everything except patches and latent slots).
    pub fn token_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.kinds[i], PositionKind::Token(_)))
            .collect()
    }
}

/// Latent slot counts, shared across the policy and adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub k_geo: usize,
    pub k_wm: usize,
    pub wm_groups: usize,
}

impl LatentSpec {
    pub fn n_wm_total(&self) -> usize {
        self.k_wm * self.wm_groups
    }
}

/// Prompt text for a scene: bos, instruction word, ego-state buckets, then
/// the history waypoints rendered on the 0.1 m grid.
pub fn prompt_tokens(vocab: &Vocabulary, scene: &SceneRecord) -> Vec<TokenId> {
    let mut toks = vec![
        vocab.id(TOK_BOS),
        vocab.instruction_id(scene.instruction),
        vocab.speed_bucket_id(scene.ego.velocity),
        vocab.accel_bucket_id(scene.ego.acceleration),
    ];
    let mut body = String::new();
    for (i, (p, _)) in scene.history.iter().enumerate() {
        if i > 0 {
            body.push(';');
        }
        body.push_str(&render_tenths(quantize_tenths(p.x.clamp(-32.0, 32.0))));
        body.push(',');
        body.push_str(&render_tenths(quantize_tenths(p.y.clamp(-32.0, 32.0))));
    }
    toks.extend(vocab.encode_chars(&body));
    toks
}

/// Assemble the layout for a prompt plus an (optionally empty or partial)
/// answer segment. `latent` of `None` drops the WM/GEO segments entirely.
pub fn build_layout(
    vocab: &Vocabulary,
    prompt: &[TokenId],
    act_tokens: &[TokenId],
    latent: Option<LatentSpec>,
) -> SequenceLayout {
    let mut kinds = Vec::new();
    let mut segments = Vec::new();
    for p in 0..N_PATCHES {
        kinds.push(PositionKind::Patch(p));
        segments.push(Segment::Img);
    }
    let txt_start = kinds.len();
    for &t in prompt {
        kinds.push(PositionKind::Token(t));
        segments.push(Segment::Txt);
    }
    let txt = txt_start..kinds.len();
    let mut wm_slots = Vec::new();
    let mut geo_slots = Vec::new();
    let wm_start = kinds.len();
    if let Some(spec) = latent {
        kinds.push(PositionKind::Token(vocab.id(TOK_LATENT_START_WM)));
        segments.push(Segment::Wm);
        for g in 0..spec.wm_groups {
            for i in 0..spec.k_wm {
                wm_slots.push(kinds.len());
                kinds.push(PositionKind::WmSlot(g, i));
                segments.push(Segment::Wm);
            }
        }
        kinds.push(PositionKind::Token(vocab.id(TOK_LATENT_END_WM)));
        segments.push(Segment::Wm);
    }
    let wm = wm_start..kinds.len();
    let geo_start = kinds.len();
    if let Some(spec) = latent {
        kinds.push(PositionKind::Token(vocab.id(TOK_LATENT_START_3D)));
        segments.push(Segment::Geo);
        for i in 0..spec.k_geo {
            geo_slots.push(kinds.len());
            kinds.push(PositionKind::GeoSlot(i));
            segments.push(Segment::Geo);
        }
        kinds.push(PositionKind::Token(vocab.id(TOK_LATENT_END_3D)));
        segments.push(Segment::Geo);
    }
    let geo = geo_start..kinds.len();
    let act_start = kinds.len();
    for &t in act_tokens {
        kinds.push(PositionKind::Token(t));
        segments.push(Segment::Act);
    }
    let act = act_start..kinds.len();
    SequenceLayout {
        kinds,
        segments,
        img: 0..N_PATCHES,
        txt,
        wm,
        geo,
        act,
        wm_slots,
        geo_slots,
    }
}

/// Convenience: layout whose answer segment is just the opening tag, ready
/// for decoding to extend.
pub fn generation_layout(
    vocab: &Vocabulary,
    prompt: &[TokenId],
    latent: Option<LatentSpec>,
) -> SequenceLayout {
    build_layout(vocab, prompt, &[vocab.id(TOK_ANSWER_OPEN)], latent)
}
