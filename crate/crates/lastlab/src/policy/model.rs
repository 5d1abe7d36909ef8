//! The autoregressive policy backbone: a small pre-norm transformer over the
//! interleaved sequence, with latent slots fed by learned input embeddings.
//!
//! Two execution paths share the same parameters: a taped [`forward`] used by
//! training (full sequence, gradients, attention-weight capture) and the
//! allocation-light [`Decoder`] used for token-by-token generation.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::LastlabError;
use crate::math::graph::{gelu_tanh, Graph, Var};
use crate::math::params::ParamStore;
use crate::math::rng::{gaussian, stream};
use crate::microworld::raster::{N_PATCHES, PATCH_DIM};
use crate::policy::layout::{LatentSpec, PositionKind, SequenceLayout};
use crate::policy::mask::{mask_row, AttentionMaskSpec, MaskMode, MaskPhase};
use crate::tokenizer::Vocabulary;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub latent: Option<LatentSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LastlabError> {
        if self.d_model % self.n_heads != 0 {
            return Err(LastlabError::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_layers == 0 || self.d_model == 0 {
            return Err(LastlabError::Config("empty model".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Initialize the policy namespace. Adapters live in a separate namespace and
/// are added by the adapters module.
pub fn init_policy_params(cfg: &ModelConfig, vocab: &Vocabulary, seed: u64) -> ParamStore {
    cfg.validate().expect("valid model config");
    let mut rng = stream(seed, "init.policy", &[]);
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    let normal = |r: usize, c: usize, std: f64, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((r, c), |_| gaussian(rng) * std)
    };
    p.insert("policy.wte", normal(vocab.len(), d, 0.02, &mut rng));
    p.insert("policy.wpe", normal(cfg.max_seq_len, d, 0.02, &mut rng));
    p.insert("policy.patch.w", normal(PATCH_DIM, d, 0.02, &mut rng));
    if let Some(spec) = cfg.latent {
        p.insert("policy.slot.wm", normal(spec.n_wm_total(), d, 0.02, &mut rng));
        p.insert("policy.slot.geo", normal(spec.k_geo, d, 0.02, &mut rng));
    }
    let out_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
    for l in 0..cfg.n_layers {
        p.insert(&format!("policy.l{l}.norm1.g"), Array2::ones((1, d)));
        p.insert(&format!("policy.l{l}.attn.wq"), normal(d, d, 0.02, &mut rng));
        p.insert(&format!("policy.l{l}.attn.wk"), normal(d, d, 0.02, &mut rng));
        p.insert(&format!("policy.l{l}.attn.wv"), normal(d, d, 0.02, &mut rng));
        p.insert(&format!("policy.l{l}.attn.wo"), normal(d, d, out_std, &mut rng));
        p.insert(&format!("policy.l{l}.norm2.g"), Array2::ones((1, d)));
        p.insert(&format!("policy.l{l}.mlp.fc1"), normal(d, 4 * d, 0.02, &mut rng));
        p.insert(&format!("policy.l{l}.mlp.fc2"), normal(4 * d, d, out_std, &mut rng));
    }
    p.insert("policy.norm_f.g", Array2::ones((1, d)));
    p
}

/// Parameters bound into a graph, leaf or constant.
pub struct GraphParams {
    vars: BTreeMap<String, Var>,
}

impl GraphParams {
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in store.iter() {
            let v = if trainable {
                g.leaf(value.clone())
            } else {
                g.constant(value.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect gradients after a backward pass, keyed by parameter name.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(gr) = g.grad(*var) {
                out.insert(name.clone(), gr.clone());
            }
        }
        out
    }
}

/// Attention-output pinning: rows at `positions` are replaced, per layer, by
/// the captured matrices (used by the information-flow tests).
pub struct AttnPin {
    pub positions: Vec<usize>,
    pub per_layer: Vec<Array2<f64>>,
}

#[derive(Default)]
pub struct ForwardOpts {
    pub capture_attn_weights: bool,
    pub capture_attn_outputs: bool,
    pub pin: Option<AttnPin>,
}

#[derive(Default)]
pub struct ForwardTrace {
    /// Realized attention weights, index = layer * n_heads + head, each L x L.
    pub attn_weights: Vec<Array2<f64>>,
    /// Post-projection attention block outputs (pre-residual), one L x d per layer.
    pub attn_outputs: Vec<Array2<f64>>,
}

pub struct ForwardOutput {
    /// Final-layer hidden states, pre head-norm (L x d).
    pub hidden: Var,
    /// Logits over the vocabulary at every position (L x V).
    pub logits: Var,
    /// Hidden states at the dynamics slots ((groups * k_wm) x d).
    pub latent_wm: Option<Var>,
    /// Hidden states at the geometry slots (k_geo x d).
    pub latent_geo: Option<Var>,
    pub trace: ForwardTrace,
}

/// Assemble the input embedding matrix for a layout.
fn assemble_input(
    g: &mut Graph,
    gp: &GraphParams,
    layout: &SequenceLayout,
    patches: &Arc<Array2<f64>>,
) -> Var {
    // patch embeddings for the IMG block
    let patches_v = g.constant(patches.as_ref().clone());
    let img = g.matmul(patches_v, gp.var("policy.patch.w"));
    let mut parts: Vec<Var> = vec![img];
    // remaining positions resolve to embedding-table rows; batch consecutive
    // token runs into one gather
    let mut run: Vec<usize> = Vec::new();
    let flush_tokens = |g: &mut Graph, run: &mut Vec<usize>, parts: &mut Vec<Var>| {
        if !run.is_empty() {
            let rows = Arc::new(run.clone());
            parts.push(g.select_rows(gp.var("policy.wte"), rows));
            run.clear();
        }
    };
    let mut i = layout.img.end;
    while i < layout.len() {
        match layout.kinds[i] {
            PositionKind::Token(t) => {
                run.push(t as usize);
                i += 1;
            }
            PositionKind::WmSlot(_, _) => {
                flush_tokens(g, &mut run, &mut parts);
                // contiguous run of wm slots
                let start = i;
                while i < layout.len() && matches!(layout.kinds[i], PositionKind::WmSlot(_, _)) {
                    i += 1;
                }
                let spec = |k: PositionKind| match k {
                    PositionKind::WmSlot(grp, idx) => (grp, idx),
                    _ => unreachable!(),
                };
                let rows: Vec<usize> = (start..i)
                    .map(|p| {
                        let (grp, idx) = spec(layout.kinds[p]);
                        grp * layout.wm_slots.len() / slot_groups(layout) + idx
                    })
                    .collect();
                parts.push(g.select_rows(gp.var("policy.slot.wm"), Arc::new(rows)));
            }
            PositionKind::GeoSlot(_) => {
                flush_tokens(g, &mut run, &mut parts);
                let start = i;
                while i < layout.len() && matches!(layout.kinds[i], PositionKind::GeoSlot(_)) {
                    i += 1;
                }
                let rows: Vec<usize> = (start..i)
                    .map(|p| match layout.kinds[p] {
                        PositionKind::GeoSlot(idx) => idx,
                        _ => unreachable!(),
                    })
                    .collect();
                parts.push(g.select_rows(gp.var("policy.slot.geo"), Arc::new(rows)));
            }
            PositionKind::Patch(_) => unreachable!("patches only lead the sequence"),
        }
    }
    flush_tokens(g, &mut run, &mut parts);
    let emb = g.concat_rows(&parts);
    let pos_rows = Arc::new((0..layout.len()).collect::<Vec<usize>>());
    let pos = g.select_rows(gp.var("policy.wpe"), pos_rows);
    g.add(emb, pos)
}

fn slot_groups(layout: &SequenceLayout) -> usize {
    let mut groups = 0usize;
    for k in &layout.kinds {
        if let PositionKind::WmSlot(gi, _) = k {
            groups = groups.max(gi + 1);
        }
    }
    groups.max(1)
}

/// Full-sequence taped forward pass.
pub fn forward(
    g: &mut Graph,
    gp: &GraphParams,
    cfg: &ModelConfig,
    patches: &Arc<Array2<f64>>,
    layout: &SequenceLayout,
    mask: &AttentionMaskSpec,
    opts: &ForwardOpts,
) -> Result<ForwardOutput, LastlabError> {
    cfg.validate()?;
    if patches.dim() != (N_PATCHES, PATCH_DIM) {
        return Err(LastlabError::Config(format!(
            "patch matrix {:?}, expected ({N_PATCHES}, {PATCH_DIM})",
            patches.dim()
        )));
    }
    if layout.len() > cfg.max_seq_len {
        return Err(LastlabError::Config(format!(
            "sequence length {} exceeds max {}",
            layout.len(),
            cfg.max_seq_len
        )));
    }
    if mask.len() != layout.len() {
        return Err(LastlabError::Config("mask/layout length mismatch".into()));
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut trace = ForwardTrace::default();
    let mut x = assemble_input(g, gp, layout, patches);
    for l in 0..cfg.n_layers {
        let pf = format!("policy.l{l}");
        let h = g.rms_norm_rows(x, gp.var(&format!("{pf}.norm1.g")), RMS_EPS);
        let q = g.matmul(h, gp.var(&format!("{pf}.attn.wq")));
        let k = g.matmul(h, gp.var(&format!("{pf}.attn.wk")));
        let v = g.matmul(h, gp.var(&format!("{pf}.attn.wv")));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = g.select_cols(q, hd * dh, (hd + 1) * dh);
            let kh = g.select_cols(k, hd * dh, (hd + 1) * dh);
            let vh = g.select_cols(v, hd * dh, (hd + 1) * dh);
            let scores = g.matmul_nt(qh, kh);
            let scaled = g.mul_scalar(scores, scale);
            let probs = g.softmax_rows_masked(scaled, mask.allow.clone());
            if opts.capture_attn_weights {
                trace.attn_weights.push(g.value(probs).clone());
            }
            heads.push(g.matmul(probs, vh));
        }
        let ctx = g.concat_cols(&heads);
        let mut attn = g.matmul(ctx, gp.var(&format!("{pf}.attn.wo")));
        if let Some(pin) = &opts.pin {
            let n = layout.len();
            let mut keep = Array2::from_elem((n, cfg.d_model), 1.0);
            let mut vals = Array2::zeros((n, cfg.d_model));
            for &p in &pin.positions {
                for c in 0..cfg.d_model {
                    keep[(p, c)] = 0.0;
                    vals[(p, c)] = pin.per_layer[l][(p, c)];
                }
            }
            let kept = g.mul_const(attn, Arc::new(keep));
            attn = g.add_const(kept, Arc::new(vals));
        }
        if opts.capture_attn_outputs {
            trace.attn_outputs.push(g.value(attn).clone());
        }
        x = g.add(x, attn);
        let h2 = g.rms_norm_rows(x, gp.var(&format!("{pf}.norm2.g")), RMS_EPS);
        let a1 = g.matmul(h2, gp.var(&format!("{pf}.mlp.fc1")));
        let a1g = g.gelu(a1);
        let a2 = g.matmul(a1g, gp.var(&format!("{pf}.mlp.fc2")));
        x = g.add(x, a2);
    }
    let hn = g.rms_norm_rows(x, gp.var("policy.norm_f.g"), RMS_EPS);
    let logits = g.matmul_nt(hn, gp.var("policy.wte"));
    let latent_wm = if layout.wm_slots.is_empty() {
        None
    } else {
        Some(g.select_rows(x, Arc::new(layout.wm_slots.clone())))
    };
    let latent_geo = if layout.geo_slots.is_empty() {
        None
    } else {
        Some(g.select_rows(x, Arc::new(layout.geo_slots.clone())))
    };
    Ok(ForwardOutput {
        hidden: x,
        logits,
        latent_wm,
        latent_geo,
        trace,
    })
}

fn rms_norm_row(x: &Array1<f64>, gain: &Array2<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let ms = x.iter().map(|&t| t * t).sum::<f64>() / d;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    Array1::from_shape_fn(x.len(), |j| x[j] * inv * gain[(0, j)])
}

struct LayerCache {
    k: Array2<f64>,
    v: Array2<f64>,
}

/// Incremental causal decoder over a growing sequence; mathematically the
/// same computation as [`forward`], evaluated one position at a time.
pub struct Decoder<'a> {
    store: &'a ParamStore,
    cfg: ModelConfig,
    phase: MaskPhase,
    mode: MaskMode,
    patch_emb: Array2<f64>,
    cache: Vec<LayerCache>,
    layout: SequenceLayout,
    fed: usize,
    latent_wm_rows: Vec<Array1<f64>>,
    latent_geo_rows: Vec<Array1<f64>>,
    last_logits: Option<Array1<f64>>,
}

impl<'a> Decoder<'a> {
    /// Build the decoder and run the whole current layout (prompt, latent
    /// segments, and any seed answer tokens) through it.
    pub fn new(
        store: &'a ParamStore,
        cfg: &ModelConfig,
        layout: SequenceLayout,
        patches: &Array2<f64>,
        phase: MaskPhase,
        mode: MaskMode,
    ) -> Result<Self, LastlabError> {
        Ok(Self::new_capturing(store, cfg, layout, patches, phase, mode, &[])?.0)
    }

    /// Like [`Decoder::new`], additionally returning the logit rows at the
    /// requested positions (used to re-score sampled tokens cheaply).
    pub fn new_capturing(
        store: &'a ParamStore,
        cfg: &ModelConfig,
        layout: SequenceLayout,
        patches: &Array2<f64>,
        phase: MaskPhase,
        mode: MaskMode,
        capture_positions: &[usize],
    ) -> Result<(Self, Vec<Array1<f64>>), LastlabError> {
        cfg.validate()?;
        let patch_emb = patches.dot(store.get("policy.patch.w"));
        let mut dec = Self {
            store,
            cfg: *cfg,
            phase,
            mode,
            patch_emb,
            cache: (0..cfg.n_layers)
                .map(|_| LayerCache {
                    k: Array2::zeros((cfg.max_seq_len, cfg.d_model)),
                    v: Array2::zeros((cfg.max_seq_len, cfg.d_model)),
                })
                .collect(),
            layout,
            fed: 0,
            latent_wm_rows: Vec::new(),
            latent_geo_rows: Vec::new(),
            last_logits: None,
        };
        let mut captured = Vec::with_capacity(capture_positions.len());
        while dec.fed < dec.layout.len() {
            let pos = dec.fed;
            let wanted = capture_positions.contains(&pos);
            let need_logits = wanted || pos == dec.layout.len() - 1;
            dec.feed_next(need_logits)?;
            if wanted {
                captured.push(dec.last_logits().clone());
            }
        }
        Ok((dec, captured))
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    /// Append one answer token to the layout and feed it.
    pub fn push_act_token(&mut self, tok: crate::tokenizer::TokenId) -> Result<(), LastlabError> {
        self.layout.kinds.push(PositionKind::Token(tok));
        self.layout
            .segments
            .push(crate::policy::layout::Segment::Act);
        self.layout.act.end += 1;
        self.feed_next(true)
    }

    pub fn last_logits(&self) -> &Array1<f64> {
        self.last_logits.as_ref().expect("no logits fed yet")
    }

    /// Hidden rows captured at the latent slots, in slot order.
    pub fn latent_chain(&self) -> (Array2<f64>, Array2<f64>) {
        let d = self.cfg.d_model;
        let wm = if self.latent_wm_rows.is_empty() {
            Array2::zeros((0, d))
        } else {
            let mut m = Array2::zeros((self.latent_wm_rows.len(), d));
            for (i, r) in self.latent_wm_rows.iter().enumerate() {
                m.row_mut(i).assign(r);
            }
            m
        };
        let geo = if self.latent_geo_rows.is_empty() {
            Array2::zeros((0, d))
        } else {
            let mut m = Array2::zeros((self.latent_geo_rows.len(), d));
            for (i, r) in self.latent_geo_rows.iter().enumerate() {
                m.row_mut(i).assign(r);
            }
            m
        };
        (wm, geo)
    }

    fn input_row(&self, pos: usize) -> Array1<f64> {
        let d = self.cfg.d_model;
        let wpe = self.store.get("policy.wpe");
        let mut row = match self.layout.kinds[pos] {
            PositionKind::Patch(p) => self.patch_emb.row(p).to_owned(),
            PositionKind::Token(t) => self.store.get("policy.wte").row(t as usize).to_owned(),
            PositionKind::WmSlot(grp, idx) => {
                let spec = self.cfg.latent.expect("wm slot without latent spec");
                self.store
                    .get("policy.slot.wm")
                    .row(grp * spec.k_wm + idx)
                    .to_owned()
            }
            PositionKind::GeoSlot(idx) => self.store.get("policy.slot.geo").row(idx).to_owned(),
        };
        for j in 0..d {
            row[j] += wpe[(pos, j)];
        }
        row
    }

    fn feed_next(&mut self, need_logits: bool) -> Result<(), LastlabError> {
        let pos = self.fed;
        if pos >= self.cfg.max_seq_len {
            return Err(LastlabError::Config(format!(
                "decode position {pos} exceeds max_seq_len"
            )));
        }
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let allow = mask_row(&self.layout, pos, self.phase, self.mode);
        let mut x = self.input_row(pos);
        for l in 0..self.cfg.n_layers {
            let pf = format!("policy.l{l}");
            let h = rms_norm_row(&x, self.store.get(&format!("{pf}.norm1.g")));
            let h2d = h.view().insert_axis(ndarray::Axis(0));
            let q = h2d.dot(self.store.get(&format!("{pf}.attn.wq")));
            let k = h2d.dot(self.store.get(&format!("{pf}.attn.wk")));
            let v = h2d.dot(self.store.get(&format!("{pf}.attn.wv")));
            self.cache[l].k.row_mut(pos).assign(&k.row(0));
            self.cache[l].v.row_mut(pos).assign(&v.row(0));
            let mut ctx = Array1::<f64>::zeros(d);
            for hd in 0..self.cfg.n_heads {
                let qh = q.slice(ndarray::s![0, hd * dh..(hd + 1) * dh]);
                // scores over allowed cached keys
                let mut max_s = f64::NEG_INFINITY;
                let mut scores = vec![f64::NEG_INFINITY; pos + 1];
                for j in 0..=pos {
                    if !allow[j] {
                        continue;
                    }
                    let kj = self
                        .cache[l]
                        .k
                        .slice(ndarray::s![j, hd * dh..(hd + 1) * dh]);
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qh[c] * kj[c];
                    }
                    s *= scale;
                    scores[j] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = 0.0;
                for j in 0..=pos {
                    if allow[j] {
                        denom += (scores[j] - max_s).exp();
                    }
                }
                for j in 0..=pos {
                    if !allow[j] {
                        continue;
                    }
                    let w = (scores[j] - max_s).exp() / denom;
                    let vj = self
                        .cache[l]
                        .v
                        .slice(ndarray::s![j, hd * dh..(hd + 1) * dh]);
                    for c in 0..dh {
                        ctx[hd * dh + c] += w * vj[c];
                    }
                }
            }
            let attn = ctx
                .view()
                .insert_axis(ndarray::Axis(0))
                .dot(self.store.get(&format!("{pf}.attn.wo")));
            for j in 0..d {
                x[j] += attn[(0, j)];
            }
            let hm = rms_norm_row(&x, self.store.get(&format!("{pf}.norm2.g")));
            let a1 = hm
                .view()
                .insert_axis(ndarray::Axis(0))
                .dot(self.store.get(&format!("{pf}.mlp.fc1")));
            let a1g = a1.mapv(gelu_tanh);
            let a2 = a1g.dot(self.store.get(&format!("{pf}.mlp.fc2")));
            for j in 0..d {
                x[j] += a2[(0, j)];
            }
        }
        match self.layout.kinds[pos] {
            PositionKind::WmSlot(_, _) => self.latent_wm_rows.push(x.clone()),
            PositionKind::GeoSlot(_) => self.latent_geo_rows.push(x.clone()),
            _ => {}
        }
        if need_logits {
            let hn = rms_norm_row(&x, self.store.get("policy.norm_f.g"));
            let logits = hn
                .view()
                .insert_axis(ndarray::Axis(0))
                .dot(&self.store.get("policy.wte").t());
            self.last_logits = Some(logits.row(0).to_owned());
        }
        self.fed += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::raster::rasterize;
    use crate::microworld::scene::{generate_scene, Difficulty};
    use crate::policy::layout::{build_layout, prompt_tokens};
    use crate::policy::mask::build_mask;
    use crate::tokenizer::serialize_trajectory;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 320,
            latent: Some(LatentSpec { k_geo: 4, k_wm: 4, wm_groups: 3 }),
        }
    }

    fn scene_fixture(cfg: &ModelConfig) -> (Vocabulary, Arc<Array2<f64>>, SequenceLayout) {
        let vocab = Vocabulary::new();
        let scene = generate_scene(3, Difficulty::Easy);
        let patches = Arc::new(rasterize(&scene, 0.0).unwrap().patches());
        let prompt = prompt_tokens(&vocab, &scene);
        let act = serialize_trajectory(&vocab, &scene.gt_trajectory).unwrap();
        let layout = build_layout(&vocab, &prompt, &act, cfg.latent);
        (vocab, patches, layout)
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let cfg = small_cfg();
        let vocab = Vocabulary::new();
        let mut store = init_policy_params(&cfg, &vocab, 0);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            store.get_mut(&n).fill(0.0);
        }
        let (_, patches, layout) = scene_fixture(&cfg);
        let mask = build_mask(&layout, MaskPhase::Phase1, MaskMode::Structured);
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, false);
        let out = forward(&mut g, &gp, &cfg, &patches, &layout, &mask, &ForwardOpts::default()).unwrap();
        let logits = g.value(out.logits);
        for i in 0..logits.nrows() {
            for j in 1..logits.ncols() {
                assert_eq!(logits[(i, j)], logits[(i, 0)]);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_per_scene() {
        let cfg = small_cfg();
        let vocab = Vocabulary::new();
        let store = init_policy_params(&cfg, &vocab, 7);
        let (_, patches, layout) = scene_fixture(&cfg);
        let mask = build_mask(&layout, MaskPhase::Phase2AndRl, MaskMode::Structured);
        let run = || {
            let mut g = Graph::new();
            let gp = GraphParams::bind(&mut g, &store, false);
            let out = forward(&mut g, &gp, &cfg, &patches, &layout, &mask, &ForwardOpts::default()).unwrap();
            g.value(out.logits).clone()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn causality_over_discrete_tokens() {
        let cfg = small_cfg();
        let vocab = Vocabulary::new();
        let store = init_policy_params(&cfg, &vocab, 1);
        let (_, patches, layout) = scene_fixture(&cfg);
        let mask = build_mask(&layout, MaskPhase::Phase2AndRl, MaskMode::Structured);
        let logits_of = |layout: &SequenceLayout| {
            let mut g = Graph::new();
            let gp = GraphParams::bind(&mut g, &store, false);
            let out = forward(&mut g, &gp, &cfg, &patches, layout, &mask, &ForwardOpts::default()).unwrap();
            g.value(out.logits).clone()
        };
        let base = logits_of(&layout);
        // flip the last act token; logits strictly before it must be unchanged
        let mut changed = layout.clone();
        let last = changed.len() - 1;
        changed.kinds[last] = PositionKind::Token(vocab.id("7"));
        let alt = logits_of(&changed);
        for i in 0..last {
            for j in 0..base.ncols() {
                assert_eq!(base[(i, j)].to_bits(), alt[(i, j)].to_bits());
            }
        }
        assert!((0..base.ncols()).any(|j| base[(last, j)] != alt[(last, j)]));
    }

    #[test]
    fn mask_zero_property_on_weight_tensors() {
        let cfg = small_cfg();
        let vocab = Vocabulary::new();
        let store = init_policy_params(&cfg, &vocab, 5);
        let (_, patches, layout) = scene_fixture(&cfg);
        for phase in [MaskPhase::Phase1, MaskPhase::Phase2AndRl] {
            let mask = build_mask(&layout, phase, MaskMode::Structured);
            let mut g = Graph::new();
            let gp = GraphParams::bind(&mut g, &store, false);
            let opts = ForwardOpts { capture_attn_weights: true, ..Default::default() };
            let out = forward(&mut g, &gp, &cfg, &patches, &layout, &mask, &opts).unwrap();
            assert_eq!(out.trace.attn_weights.len(), cfg.n_layers * cfg.n_heads);
            for w in &out.trace.attn_weights {
                for q in 0..layout.len() {
                    for k in 0..layout.len() {
                        if !mask.allow[(q, k)] {
                            assert_eq!(w[(q, k)], 0.0, "phase {phase:?} weight at ({q},{k})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn decoder_matches_full_forward() {
        let cfg = small_cfg();
        let vocab = Vocabulary::new();
        let store = init_policy_params(&cfg, &vocab, 9);
        let (_, patches, layout) = scene_fixture(&cfg);
        let mask = build_mask(&layout, MaskPhase::Phase2AndRl, MaskMode::Structured);
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, false);
        let out = forward(&mut g, &gp, &cfg, &patches, &layout, &mask, &ForwardOpts::default()).unwrap();
        let full_logits = g.value(out.logits).clone();
        let dec = Decoder::new(&store, &cfg, layout.clone(), &patches, MaskPhase::Phase2AndRl, MaskMode::Structured).unwrap();
        let last = layout.len() - 1;
        let inc = dec.last_logits();
        for j in 0..full_logits.ncols() {
            assert!(
                (full_logits[(last, j)] - inc[j]).abs() < 1e-9,
                "logit {j}: {} vs {}",
                full_logits[(last, j)],
                inc[j]
            );
        }
        // latent chains agree too
        let (wm, geo) = dec.latent_chain();
        let wm_full = g.value(out.latent_wm.unwrap()).clone();
        let geo_full = g.value(out.latent_geo.unwrap()).clone();
        assert!(wm.iter().zip(wm_full.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(geo.iter().zip(geo_full.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn batch_items_are_independent() {
        // two identical scenes pushed through the same graph produce
        // identical outputs
        let cfg = small_cfg();
        let vocab = Vocabulary::new();
        let store = init_policy_params(&cfg, &vocab, 11);
        let (_, patches, layout) = scene_fixture(&cfg);
        let mask = build_mask(&layout, MaskPhase::Phase1, MaskMode::Structured);
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, false);
        let a = forward(&mut g, &gp, &cfg, &patches, &layout, &mask, &ForwardOpts::default()).unwrap();
        let b = forward(&mut g, &gp, &cfg, &patches, &layout, &mask, &ForwardOpts::default()).unwrap();
        let la = g.value(a.logits);
        let lb = g.value(b.logits);
        assert!(la.iter().zip(lb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
