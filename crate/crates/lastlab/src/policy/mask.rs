//! Structured causal masking.
//!
//! Base mask is causal. On top of it:
//! - Latent mutual masking: WM and GEO segments never attend to each other,
//!   in every phase.
//! - Visual bottleneck masking: in phase 1, answer positions cannot attend to
//!   image positions, so scene information must route through the latents.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::policy::layout::{Segment, SequenceLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskPhase {
    Phase1,
    Phase2AndRl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Structured,
    Standard,
}

#[derive(Debug, Clone)]
pub struct AttentionMaskSpec {
    pub allow: Arc<Array2<bool>>,
}

impl AttentionMaskSpec {
    pub fn len(&self) -> usize {
        self.allow.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.allow.nrows() == 0
    }
}

/// Whether a query at `q_seg` may see a key at `k_seg` under the structural
/// rules (causality handled separately).
pub fn segment_rule(q_seg: Segment, k_seg: Segment, phase: MaskPhase, mode: MaskMode) -> bool {
    if mode == MaskMode::Standard {
        return true;
    }
    match (q_seg, k_seg) {
        (Segment::Wm, Segment::Geo) | (Segment::Geo, Segment::Wm) => false,
        (Segment::Act, Segment::Img) => phase != MaskPhase::Phase1,
        _ => true,
    }
}

pub fn build_mask(layout: &SequenceLayout, phase: MaskPhase, mode: MaskMode) -> AttentionMaskSpec {
    let n = layout.len();
    let mut allow = Array2::from_elem((n, n), false);
    for q in 0..n {
        for k in 0..=q {
            allow[(q, k)] = segment_rule(layout.segment_of(q), layout.segment_of(k), phase, mode);
        }
        // self-attention always stays on
        allow[(q, q)] = true;
    }
    AttentionMaskSpec {
        allow: Arc::new(allow),
    }
}

/// Mask row for a single query position over keys `0..=q`, matching the full
/// mask's semantics; used by the incremental decoder.
pub fn mask_row(
    layout: &SequenceLayout,
    q: usize,
    phase: MaskPhase,
    mode: MaskMode,
) -> Vec<bool> {
    (0..=q)
        .map(|k| {
            k == q || segment_rule(layout.segment_of(q), layout.segment_of(k), phase, mode)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::scene::{generate_scene, Difficulty};
    use crate::policy::layout::{build_layout, prompt_tokens, LatentSpec};
    use crate::tokenizer::{serialize_trajectory, Vocabulary};

    fn test_layout() -> SequenceLayout {
        let vocab = Vocabulary::new();
        let scene = generate_scene(1, Difficulty::Easy);
        let prompt = prompt_tokens(&vocab, &scene);
        let act = serialize_trajectory(&vocab, &scene.gt_trajectory).unwrap();
        build_layout(
            &vocab,
            &prompt,
            &act,
            Some(LatentSpec { k_geo: 12, k_wm: 12, wm_groups: 3 }),
        )
    }

    #[test]
    fn causal_base_and_diagonal() {
        let layout = test_layout();
        for phase in [MaskPhase::Phase1, MaskPhase::Phase2AndRl] {
            let m = build_mask(&layout, phase, MaskMode::Structured);
            for q in 0..layout.len() {
                assert!(m.allow[(q, q)]);
                for k in q + 1..layout.len() {
                    assert!(!m.allow[(q, k)], "future leak at ({q},{k})");
                }
            }
        }
    }

    #[test]
    fn phase1_blocks_act_to_img() {
        let layout = test_layout();
        let m = build_mask(&layout, MaskPhase::Phase1, MaskMode::Structured);
        for q in layout.act.clone() {
            for k in layout.img.clone() {
                assert!(!m.allow[(q, k)]);
            }
            // text and latents stay visible
            assert!(m.allow[(q, layout.txt.start)]);
            assert!(m.allow[(q, layout.wm_slots[0])]);
        }
    }

    #[test]
    fn latent_mutual_masking_in_both_phases() {
        let layout = test_layout();
        for phase in [MaskPhase::Phase1, MaskPhase::Phase2AndRl] {
            let m = build_mask(&layout, phase, MaskMode::Structured);
            for q in layout.wm.clone() {
                for k in layout.geo.clone() {
                    if q != k {
                        assert!(!m.allow[(q, k)]);
                    }
                }
            }
            for q in layout.geo.clone() {
                for k in layout.wm.clone() {
                    assert!(!m.allow[(q, k)], "geo {q} sees wm {k}");
                }
            }
        }
    }

    #[test]
    fn phase2_reopens_act_to_img() {
        let layout = test_layout();
        let m = build_mask(&layout, MaskPhase::Phase2AndRl, MaskMode::Structured);
        for q in layout.act.clone() {
            for k in layout.img.clone() {
                assert!(m.allow[(q, k)]);
            }
        }
    }

    #[test]
    fn standard_mode_is_pure_causal() {
        let layout = test_layout();
        let m = build_mask(&layout, MaskPhase::Phase1, MaskMode::Standard);
        for q in 0..layout.len() {
            for k in 0..=q {
                assert!(m.allow[(q, k)]);
            }
        }
    }

    #[test]
    fn mask_row_matches_full_mask() {
        let layout = test_layout();
        for phase in [MaskPhase::Phase1, MaskPhase::Phase2AndRl] {
            let m = build_mask(&layout, phase, MaskMode::Structured);
            for q in [0, 5, layout.wm.start, layout.geo.start + 2, layout.act.start, layout.len() - 1] {
                let row = mask_row(&layout, q, phase, MaskMode::Structured);
                for k in 0..=q {
                    assert_eq!(row[k], m.allow[(q, k)], "q={q} k={k}");
                }
            }
        }
    }
}
