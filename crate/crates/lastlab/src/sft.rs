//! Progressive two-stage supervised fine-tuning: phase-dependent loss
//! weights, structured-mask teacher forcing, and the deterministic training
//! loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    alignment_losses, apply_visual_mask, draw_visual_mask, dynamics_adapter, geometry_adapter,
    AdapterConfig,
};
use crate::error::LastlabError;
use crate::math::graph::{Graph, Var};
use crate::math::params::{Adam, ParamStore};
use crate::math::rng::stream;
use crate::microworld::dataset::SceneExample;
use crate::microworld::scene::SceneRecord;
use crate::policy::layout::{build_layout, prompt_tokens, SequenceLayout};
use crate::policy::mask::{build_mask, MaskMode, MaskPhase};
use crate::policy::model::{forward, ForwardOpts, GraphParams, ModelConfig};
use crate::tokenizer::{serialize_trajectory, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SftPhase {
    Phase1,
    Phase2,
}

impl SftPhase {
    pub fn mask_phase(self) -> MaskPhase {
        match self {
            SftPhase::Phase1 => MaskPhase::Phase1,
            SftPhase::Phase2 => MaskPhase::Phase2AndRl,
        }
    }

    pub fn index(self) -> usize {
        match self {
            SftPhase::Phase1 => 1,
            SftPhase::Phase2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseWeights {
    pub lambda_action: f64,
    pub lambda_wm: f64,
    pub lambda_3d: f64,
}

/// Phase 1 prioritizes the physical alignment losses; phase 2 inverts the
/// weighting toward action generation.
pub fn phase_weights(phase: SftPhase) -> PhaseWeights {
    match phase {
        SftPhase::Phase1 => PhaseWeights {
            lambda_action: 0.01,
            lambda_wm: 1.0,
            lambda_3d: 1.0,
        },
        SftPhase::Phase2 => PhaseWeights {
            lambda_action: 1.0,
            lambda_wm: 0.01,
            lambda_3d: 0.01,
        },
    }
}

/// L_total = lambda_action * CE + lambda_wm * L_WM + lambda_3d * L_3D.
pub fn total_loss(ce: f64, l_wm: f64, l_3d: f64, w: &PhaseWeights) -> f64 {
    w.lambda_action * ce + w.lambda_wm * l_wm + w.lambda_3d * l_3d
}

/// Everything the trainer consumes for one scene, precomputed at load.
#[derive(Clone)]
pub struct TrainExample {
    pub scene: SceneRecord,
    pub patches: Arc<Array2<f64>>,
    pub prompt: Vec<TokenId>,
    pub act_tokens: Vec<TokenId>,
    pub teacher_geo: Arc<Array2<f64>>,
    pub teacher_dyn: Arc<Array2<f64>>,
}

impl TrainExample {
    pub fn from_example(vocab: &Vocabulary, ex: &SceneExample) -> Result<Self, LastlabError> {
        let raster = ex.raster()?;
        let act = serialize_trajectory(vocab, &ex.scene.gt_trajectory)
            .map_err(|e| LastlabError::Dataset(format!("gt serialization: {e}")))?;
        Ok(Self {
            scene: ex.scene.clone(),
            patches: Arc::new(raster.patches()),
            prompt: prompt_tokens(vocab, &ex.scene),
            act_tokens: act,
            teacher_geo: Arc::new(ex.teacher.geo_matrix()),
            teacher_dyn: Arc::new(ex.teacher.dyn_matrix()),
        })
    }

    pub fn layout(&self, vocab: &Vocabulary, model: &ModelConfig) -> SequenceLayout {
        build_layout(vocab, &self.prompt, &self.act_tokens, model.latent)
    }
}

/// Static training-time context shared across steps.
pub struct TrainContext {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub mask_mode: MaskMode,
    pub mask_ratio: f64,
    pub latent_supervision: bool,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l_wm: f64,
    pub l_3d: f64,
    pub total: f64,
}

pub struct SceneLossVars {
    pub ce: Var,
    pub l_wm: Option<Var>,
    pub l_3d: Option<Var>,
}

/// Teacher-forced losses for one scene under a fixed visual keep mask.
/// Pure in (params, example, keep): both the trainer and the gradient checks
/// drive this.
pub fn scene_losses(
    g: &mut Graph,
    gp: &GraphParams,
    ctx: &TrainContext,
    ex: &TrainExample,
    phase: SftPhase,
    keep: Option<&[bool]>,
) -> Result<SceneLossVars, LastlabError> {
    let layout = ex.layout(&ctx.vocab, &ctx.model);
    let mask = build_mask(&layout, phase.mask_phase(), ctx.mask_mode);
    let out = forward(
        g,
        gp,
        &ctx.model,
        &ex.patches,
        &layout,
        &mask,
        &ForwardOpts::default(),
    )?;
    // cross entropy over answer tokens after the forced opening tag
    let targets: Vec<usize> = (layout.act.start + 1..layout.act.end)
        .map(|p| match layout.kinds[p] {
            crate::policy::layout::PositionKind::Token(t) => t as usize,
            _ => unreachable!("answer segment holds tokens"),
        })
        .collect();
    if targets.is_empty() {
        return Err(LastlabError::Config("empty answer segment".into()));
    }
    let pred_positions: Vec<usize> = (layout.act.start..layout.act.end - 1).collect();
    let rows = g.select_rows(out.logits, Arc::new(pred_positions));
    let ls = g.log_softmax_rows(rows);
    let picked = g.gather_per_row(ls, Arc::new(targets));
    let mean_lp = g.mean_all(picked);
    let neg = g.neg(mean_lp);
    let ce = neg;

    let (l_wm, l_3d) = if ctx.latent_supervision && ctx.model.latent.is_some() {
        let keep = keep.ok_or_else(|| LastlabError::Config("missing visual mask".into()))?;
        let patches_v = g.constant(ex.patches.as_ref().clone());
        let e_img = g.matmul(patches_v, gp.var("policy.patch.w"));
        let e_masked = apply_visual_mask(g, e_img, keep);
        let h_wm = out
            .latent_wm
            .ok_or_else(|| LastlabError::Config("missing wm latents".into()))?;
        let h_geo = out
            .latent_geo
            .ok_or_else(|| LastlabError::Config("missing geo latents".into()))?;
        let p_geo = geometry_adapter(g, gp, &ctx.adapter, h_geo, e_masked)?;
        let p_dyn = dynamics_adapter(g, gp, &ctx.adapter, h_wm, e_masked)?;
        let (l_3d, l_wm) = alignment_losses(g, p_geo, p_dyn, &ex.teacher_geo, &ex.teacher_dyn)?;
        (Some(l_wm), Some(l_3d))
    } else {
        (None, None)
    };
    Ok(SceneLossVars { ce, l_wm, l_3d })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SftConfig {
    pub phase: SftPhase,
    pub epochs: usize,
    /// Hard step cap; 0 means "run the full epochs".
    pub max_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftLogRow {
    pub step: usize,
    pub phase: usize,
    pub ce: f64,
    pub l_wm: f64,
    pub l_3d: f64,
    pub total: f64,
    pub grad_norm: f64,
}

fn scene_gradient(
    store: &ParamStore,
    ctx: &TrainContext,
    ex: &TrainExample,
    phase: SftPhase,
    keep: Option<&[bool]>,
    weight_scale: f64,
) -> Result<(BTreeMap<String, Array2<f64>>, LossBreakdown), LastlabError> {
    let w = phase_weights(phase);
    let mut g = Graph::new();
    let gp = GraphParams::bind(&mut g, store, true);
    let losses = scene_losses(&mut g, &gp, ctx, ex, phase, keep)?;
    let ce_v = g.scalar_value(losses.ce);
    let lwm_v = losses.l_wm.map_or(0.0, |v| g.scalar_value(v));
    let l3d_v = losses.l_3d.map_or(0.0, |v| g.scalar_value(v));
    // weighted scene total, scaled for batch averaging
    let mut tot = g.mul_scalar(losses.ce, w.lambda_action * weight_scale);
    if let Some(lwm) = losses.l_wm {
        let t = g.mul_scalar(lwm, w.lambda_wm * weight_scale);
        tot = g.add(tot, t);
    }
    if let Some(l3d) = losses.l_3d {
        let t = g.mul_scalar(l3d, w.lambda_3d * weight_scale);
        tot = g.add(tot, t);
    }
    let total_v = g.scalar_value(tot) / weight_scale;
    if !total_v.is_finite() {
        return Err(LastlabError::Training(format!(
            "non-finite loss on scene {}: ce={ce_v} l_wm={lwm_v} l_3d={l3d_v}",
            ex.scene.scene_id
        )));
    }
    g.backward(tot);
    Ok((
        gp.grads(&g),
        LossBreakdown {
            ce: ce_v,
            l_wm: lwm_v,
            l_3d: l3d_v,
            total: total_v,
        },
    ))
}

fn merge_grads(
    into: &mut BTreeMap<String, Array2<f64>>,
    parts: Vec<BTreeMap<String, Array2<f64>>>,
) {
    for part in parts {
        for (name, grad) in part {
            match into.get_mut(&name) {
                Some(acc) => *acc += &grad,
                None => {
                    into.insert(name, grad);
                }
            }
        }
    }
}

/// One optimization step over a batch: teacher-forced losses, adapters on the
/// masked visual embeddings, a single Adam update.
pub fn sft_step(
    store: &mut ParamStore,
    opt: &mut Adam,
    ctx: &TrainContext,
    batch: &[&TrainExample],
    cfg: &SftConfig,
    step: usize,
) -> Result<SftLogRow, LastlabError> {
    assert!(!batch.is_empty(), "empty batch");
    let scale = 1.0 / batch.len() as f64;
    // per-scene visual masks drawn from position-indexed streams so results
    // do not depend on thread scheduling
    let keeps: Vec<Option<Vec<bool>>> = (0..batch.len())
        .map(|i| {
            if ctx.latent_supervision && ctx.model.latent.is_some() {
                Some(
                    draw_visual_mask(
                        crate::microworld::raster::N_PATCHES,
                        ctx.mask_ratio,
                        &mut stream(cfg.seed, "sft.vismask", &[step as u64, i as u64]),
                    )
                    .expect("validated ratio"),
                )
            } else {
                None
            }
        })
        .collect();
    let results: Vec<Result<(BTreeMap<String, Array2<f64>>, LossBreakdown), LastlabError>> = batch
        .par_iter()
        .zip(keeps.par_iter())
        .map(|(ex, keep)| scene_gradient(store, ctx, ex, cfg.phase, keep.as_deref(), scale))
        .collect();
    let mut grads = BTreeMap::new();
    let mut sum = LossBreakdown::default();
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        let (g, b) = r?;
        parts.push(g);
        sum.ce += b.ce * scale;
        sum.l_wm += b.l_wm * scale;
        sum.l_3d += b.l_3d * scale;
        sum.total += b.total * scale;
    }
    merge_grads(&mut grads, parts);
    let grad_norm = grads
        .values()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(LastlabError::Training(format!(
            "non-finite gradient at step {step}"
        )));
    }
    opt.lr = cfg.learning_rate;
    opt.step(store, &grads);
    Ok(SftLogRow {
        step,
        phase: cfg.phase.index(),
        ce: sum.ce,
        l_wm: sum.l_wm,
        l_3d: sum.l_3d,
        total: sum.total,
        grad_norm,
    })
}

/// Run one phase over a dataset with seeded epoch shuffles. Steps are counted
/// from `step_offset` so the two phases share one log scale.
pub fn run_phase(
    store: &mut ParamStore,
    opt: &mut Adam,
    ctx: &TrainContext,
    examples: &[TrainExample],
    cfg: &SftConfig,
    step_offset: usize,
) -> Result<Vec<SftLogRow>, LastlabError> {
    if examples.is_empty() {
        return Err(LastlabError::Config("empty training split".into()));
    }
    let chunk = cfg.batch_size.max(1) * cfg.grad_accum.max(1);
    let steps_per_epoch = examples.len().div_ceil(chunk);
    // max_steps, when set, defines the budget outright (cycling extra epochs
    // as needed); otherwise the epoch count does
    let planned = if cfg.max_steps > 0 {
        cfg.max_steps
    } else {
        cfg.epochs * steps_per_epoch
    };
    let mut rows = Vec::with_capacity(planned);
    let mut step = 0;
    'outer: for epoch in 0.. {
        if step >= planned {
            break;
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut stream(
            cfg.seed,
            "sft.order",
            &[cfg.phase.index() as u64, epoch],
        ));
        for batch_idx in order.chunks(chunk) {
            if step >= planned {
                break 'outer;
            }
            let batch: Vec<&TrainExample> = batch_idx.iter().map(|&i| &examples[i]).collect();
            let row = sft_step(store, opt, ctx, &batch, cfg, step_offset + step)?;
            rows.push(row);
            step += 1;
        }
    }
    Ok(rows)
}

/// The full progressive schedule: phase 1 on the hard split, phase 2 on the
/// full split. Returns the training log.
pub fn run_sft(
    store: &mut ParamStore,
    ctx: &TrainContext,
    hard_split: &[TrainExample],
    full_split: &[TrainExample],
    phase1: &SftConfig,
    phase2: &SftConfig,
) -> Result<Vec<SftLogRow>, LastlabError> {
    let mut opt = Adam::new(phase1.learning_rate);
    let mut log = run_phase(store, &mut opt, ctx, hard_split, phase1, 0)?;
    let offset = log.len();
    let log2 = run_phase(store, &mut opt, ctx, full_split, phase2, offset)?;
    log.extend(log2);
    Ok(log)
}
