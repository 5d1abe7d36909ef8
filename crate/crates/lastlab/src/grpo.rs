//! Group Relative Policy Optimization over sampled rollouts: composite
//! reward, group-standardized advantages, clipped ratio objective with a
//! per-token KL estimate against a frozen reference policy, and adapter
//! freezing.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::LastlabError;
use crate::math::graph::{Graph, Var};
use crate::math::params::{sgd_step, Adam, ParamStore};
use crate::math::rng::stream;
use crate::metrics::{pdms, sub_scores};
use crate::microworld::scene::SceneRecord;
use crate::policy::generate::{generate, GenerationOutput, SceneInputs};
use crate::policy::mask::build_mask;
use crate::policy::mask::MaskPhase;
use crate::policy::model::{forward, ForwardOpts, GraphParams};
use crate::sft::{TrainContext, TrainExample};
use crate::tokenizer::{parse_trajectory, validate_format, TokenId, Vocabulary};

/// Reward weighting: total = traj_w * r_traj + fmt_w * r_fmt + goal_w * r_goal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardWeights {
    pub traj: f64,
    pub fmt: f64,
    pub goal: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            traj: 8.0,
            fmt: 1.0,
            goal: 1.0,
        }
    }
}

/// L1-distance tiers for the goal reward, outermost last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalTiers {
    pub tiers: Vec<(f64, f64)>,
}

impl Default for GoalTiers {
    fn default() -> Self {
        Self {
            tiers: vec![(0.5, 1.0), (1.0, 0.5), (2.0, 0.25)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_traj: f64,
    pub r_fmt: f64,
    pub r_goal: f64,
    pub total: f64,
}

/// Tiered endpoint reward on the L1 distance between predicted and
/// ground-truth endpoints.
pub fn goal_reward(pred_end: (f64, f64), gt_end: (f64, f64), tiers: &GoalTiers) -> f64 {
    let d = (pred_end.0 - gt_end.0).abs() + (pred_end.1 - gt_end.1).abs();
    for &(bound, reward) in &tiers.tiers {
        if d <= bound {
            return reward;
        }
    }
    0.0
}

/// Composite reward for one rollout's token stream.
pub fn compute_reward(
    vocab: &Vocabulary,
    tokens: &[TokenId],
    scene: &SceneRecord,
    weights: &RewardWeights,
    tiers: &GoalTiers,
) -> RewardBreakdown {
    let fc = validate_format(vocab, tokens);
    let r_fmt = 0.5 * f64::from(fc.tags_ok) + 0.5 * f64::from(fc.syntax_ok);
    let (r_traj, r_goal) = match parse_trajectory(vocab, tokens) {
        Ok(traj) => {
            let s = sub_scores(scene, &traj);
            let pe = traj.endpoint();
            let ge = scene.gt_trajectory.endpoint();
            (
                pdms(&s),
                goal_reward((pe.x, pe.y), (ge.x, ge.y), tiers),
            )
        }
        Err(_) => (0.0, 0.0),
    };
    RewardBreakdown {
        r_traj,
        r_fmt,
        r_goal,
        total: weights.traj * r_traj + weights.fmt * r_fmt + weights.goal * r_goal,
    }
}

/// Group-standardized advantages with a degeneracy guard: population std
/// below 1e-8 yields all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    assert!(rewards.len() >= 2, "group needs at least 2 rollouts");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// One sequence's contribution to the objective, in graph form.
pub struct SequenceTerms {
    /// Per-token log-probs under the current policy (n x 1, graph var).
    pub logp_new: Var,
    /// Log-probs recorded at sampling time (n x 1).
    pub logp_old: Array2<f64>,
    /// Log-probs under the frozen reference policy (n x 1).
    pub logp_ref: Array2<f64>,
    pub advantage: f64,
}

/// Clipped surrogate with per-token KL regularization:
/// J = mean_i [ mean_t min(c A, clip(c, 1-eps, 1+eps) A) - beta * mean_t (r - ln r - 1) ]
/// with c = exp(lp_new - lp_old) and r = exp(lp_ref - lp_new).
/// `eps = f64::INFINITY` disables clipping.
pub fn grpo_objective(
    g: &mut Graph,
    seqs: &[SequenceTerms],
    eps: f64,
    beta: f64,
) -> Result<Var, LastlabError> {
    if seqs.is_empty() {
        return Err(LastlabError::Config("empty rollout group".into()));
    }
    let mut terms = Vec::with_capacity(seqs.len());
    for s in seqs {
        let n = g.value(s.logp_new).nrows();
        if s.logp_old.dim() != (n, 1) || s.logp_ref.dim() != (n, 1) {
            return Err(LastlabError::Config(format!(
                "log-prob length mismatch: new {n}, old {:?}, ref {:?}",
                s.logp_old.dim(),
                s.logp_ref.dim()
            )));
        }
        let old = g.constant(s.logp_old.clone());
        let diff = g.sub(s.logp_new, old);
        let ratio = g.exp(diff);
        let surr = g.mul_scalar(ratio, s.advantage);
        let clipped_ratio = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
        let surr_clip = g.mul_scalar(clipped_ratio, s.advantage);
        let pessimistic = g.min_elem(surr, surr_clip);
        let mut term = g.mean_all(pessimistic);
        if beta != 0.0 {
            let r = g.constant(s.logp_ref.clone());
            let dref = g.sub(r, s.logp_new);
            let ratio_ref = g.exp(dref);
            let kl_t = g.sub(ratio_ref, dref);
            let kl_t1 = g.add_scalar(kl_t, -1.0);
            let seq_kl = g.mean_all(kl_t1);
            let weighted = g.mul_scalar(seq_kl, beta);
            term = g.sub(term, weighted);
        }
        terms.push(term);
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t);
    }
    Ok(g.mul_scalar(acc, 1.0 / seqs.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrpoOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub scenes_per_iter: usize,
    pub seed: u64,
    pub optimizer: GrpoOptimizer,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            temperature: 2.0,
            clip_eps: 0.2,
            kl_beta: 0.1,
            learning_rate: 1e-5,
            iterations: 100,
            scenes_per_iter: 2,
            seed: 0,
            optimizer: GrpoOptimizer::Adam,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), LastlabError> {
        if self.group_size < 2 {
            return Err(LastlabError::Config("group_size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0) {
            return Err(LastlabError::Config("clip_eps must be positive".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(LastlabError::Config("kl_beta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterStats {
    pub iter: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub r_traj_mean: f64,
    pub r_fmt_mean: f64,
    pub r_goal_mean: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub fallback_rate: f64,
    pub skipped: bool,
}

struct Rollout {
    gen: GenerationOutput,
    reward: RewardBreakdown,
    advantage: f64,
    parse_ok: bool,
}

/// Per-token log-probs of the already-sampled tokens under `store`, computed
/// with a full forward: log-softmax over the answer alphabet at the sampling
/// temperature, gathered at each sampled position.
fn sequence_logps(
    g: &mut Graph,
    gp: &GraphParams,
    ctx: &TrainContext,
    ex: &TrainExample,
    gen: &GenerationOutput,
    temperature: f64,
) -> Result<Var, LastlabError> {
    let mask = build_mask(&gen.layout, MaskPhase::Phase2AndRl, ctx.mask_mode);
    let out = forward(
        g,
        gp,
        &ctx.model,
        &ex.patches,
        &gen.layout,
        &mask,
        &ForwardOpts::default(),
    )?;
    let alphabet = ctx.vocab.answer_alphabet();
    let mut selector = Array2::zeros((ctx.vocab.len(), alphabet.len()));
    for (j, &id) in alphabet.iter().enumerate() {
        selector[(id as usize, j)] = 1.0;
    }
    let prev: Vec<usize> = gen.sampled.iter().map(|s| s.pos - 1).collect();
    let rel: Vec<usize> = gen
        .sampled
        .iter()
        .map(|s| alphabet.iter().position(|&a| a == s.token).expect("token in alphabet"))
        .collect();
    let rows = g.select_rows(out.logits, Arc::new(prev));
    let sel = g.constant(selector);
    let restricted = g.matmul(rows, sel);
    let scaled = g.mul_scalar(restricted, 1.0 / temperature.max(1e-9));
    let ls = g.log_softmax_rows(scaled);
    Ok(g.gather_per_row(ls, Arc::new(rel)))
}

/// Log-probs of a rollout's sampled tokens under an arbitrary parameter
/// snapshot (no gradients); runs on the incremental decoder.
pub fn rollout_logps(
    store: &ParamStore,
    ctx: &TrainContext,
    ex: &TrainExample,
    gen: &GenerationOutput,
    temperature: f64,
) -> Result<Array2<f64>, LastlabError> {
    let positions: Vec<usize> = gen.sampled.iter().map(|s| s.pos - 1).collect();
    let (_, logit_rows) = crate::policy::model::Decoder::new_capturing(
        store,
        &ctx.model,
        gen.layout.clone(),
        ex.patches.as_ref(),
        MaskPhase::Phase2AndRl,
        ctx.mask_mode,
        &positions,
    )?;
    let alphabet = ctx.vocab.answer_alphabet();
    let mut out = Array2::zeros((gen.sampled.len(), 1));
    for (i, (row, s)) in logit_rows.iter().zip(&gen.sampled).enumerate() {
        let (_, logps, _) = crate::policy::generate::restricted_distribution(row, &alphabet, temperature);
        let rel = alphabet.iter().position(|&a| a == s.token).expect("token in alphabet");
        out[(i, 0)] = logps[rel];
    }
    Ok(out)
}

/// One GRPO round: sample G rollouts per scene from the current policy,
/// score them, standardize within each group, and take one ascent step on the
/// clipped objective. Adapter parameters stay bitwise frozen.
#[allow(clippy::too_many_arguments)]
pub fn grpo_iteration(
    store: &mut ParamStore,
    ref_store: &ParamStore,
    opt: &mut Adam,
    ctx: &TrainContext,
    examples: &[&TrainExample],
    cfg: &GrpoConfig,
    weights: &RewardWeights,
    tiers: &GoalTiers,
    iter: usize,
) -> Result<IterStats, LastlabError> {
    cfg.validate()?;
    // rollouts, parallel over (scene, sample); rng streams are index-derived
    let jobs: Vec<(usize, usize)> = (0..examples.len())
        .flat_map(|s| (0..cfg.group_size).map(move |k| (s, k)))
        .collect();
    let gens: Vec<GenerationOutput> = jobs
        .par_iter()
        .map(|&(s, k)| {
            let ex = examples[s];
            let inputs = SceneInputs {
                patches: ex.patches.as_ref().clone(),
                prompt: ex.prompt.clone(),
            };
            let mut rng = stream(cfg.seed, "grpo.rollout", &[iter as u64, s as u64, k as u64]);
            generate(
                store,
                &ctx.model,
                &ctx.vocab,
                &inputs,
                cfg.temperature,
                ctx.mask_mode,
                &mut rng,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut groups: Vec<Vec<Rollout>> = Vec::with_capacity(examples.len());
    for (s, ex) in examples.iter().enumerate() {
        let mut group = Vec::with_capacity(cfg.group_size);
        for k in 0..cfg.group_size {
            let gen = gens[s * cfg.group_size + k].clone();
            let tokens = gen.sequence.token_ids();
            let reward = compute_reward(&ctx.vocab, &tokens, &ex.scene, weights, tiers);
            let parse_ok = parse_trajectory(&ctx.vocab, &tokens).is_ok();
            group.push(Rollout {
                gen,
                reward,
                advantage: 0.0,
                parse_ok,
            });
        }
        let advantages = group_advantages(
            &group.iter().map(|r| r.reward.total).collect::<Vec<_>>(),
        );
        for (r, a) in group.iter_mut().zip(advantages) {
            r.advantage = a;
        }
        groups.push(group);
    }

    // stats over all rollouts
    let all: Vec<&Rollout> = groups.iter().flatten().collect();
    let n_all = all.len() as f64;
    let mean_reward = all.iter().map(|r| r.reward.total).sum::<f64>() / n_all;
    let reward_std = (all
        .iter()
        .map(|r| (r.reward.total - mean_reward).powi(2))
        .sum::<f64>()
        / n_all)
        .sqrt();
    let r_traj_mean = all.iter().map(|r| r.reward.r_traj).sum::<f64>() / n_all;
    let r_fmt_mean = all.iter().map(|r| r.reward.r_fmt).sum::<f64>() / n_all;
    let r_goal_mean = all.iter().map(|r| r.reward.r_goal).sum::<f64>() / n_all;
    let fallback_rate = all.iter().filter(|r| !r.parse_ok).count() as f64 / n_all;

    // gradient of the objective, sequence by sequence; each sequence
    // contributes -J_i / N to the descent loss
    let flat: Vec<(usize, &Rollout)> = groups
        .iter()
        .enumerate()
        .flat_map(|(s, g)| g.iter().map(move |r| (s, r)))
        .collect();
    let scale = 1.0 / flat.len() as f64;
    type SeqResult = Result<(BTreeMap<String, Array2<f64>>, f64, usize, usize), LastlabError>;
    let results: Vec<SeqResult> = flat
        .par_iter()
        .map(|&(s, rollout)| {
            let ex = examples[s];
            let logp_old = Array2::from_shape_fn((rollout.gen.sampled.len(), 1), |(i, _)| {
                rollout.gen.sampled[i].logp
            });
            let logp_ref = rollout_logps(ref_store, ctx, ex, &rollout.gen, cfg.temperature)?;
            let mut g = Graph::new();
            let gp = GraphParams::bind(&mut g, store, true);
            let logp_new = sequence_logps(&mut g, &gp, ctx, ex, &rollout.gen, cfg.temperature)?;
            // clip bookkeeping and the per-sequence KL estimate, numerically
            let (clipped, n_tok, kl_sum) = {
                let new_v = g.value(logp_new);
                let mut clipped = 0usize;
                let mut kl_sum = 0.0;
                for i in 0..new_v.nrows() {
                    let c = (new_v[(i, 0)] - logp_old[(i, 0)]).exp();
                    if c < 1.0 - cfg.clip_eps || c > 1.0 + cfg.clip_eps {
                        clipped += 1;
                    }
                    let d = logp_ref[(i, 0)] - new_v[(i, 0)];
                    kl_sum += d.exp() - d - 1.0;
                }
                (clipped, new_v.nrows(), kl_sum)
            };
            let seq = SequenceTerms {
                logp_new,
                logp_old,
                logp_ref,
                advantage: rollout.advantage,
            };
            let obj = grpo_objective(&mut g, &[seq], cfg.clip_eps, cfg.kl_beta)?;
            let obj_v = g.scalar_value(obj);
            if !obj_v.is_finite() {
                return Err(LastlabError::Training(format!(
                    "non-finite objective at iter {iter}"
                )));
            }
            let neg = g.neg(obj);
            let root = g.mul_scalar(neg, scale);
            g.backward(root);
            Ok((gp.grads(&g), kl_sum, n_tok, clipped))
        })
        .collect();

    let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut token_count = 0usize;
    let mut clip_count = 0usize;
    let mut kl_acc = 0.0;
    let mut parts = Vec::with_capacity(results.len());
    let mut any_bad = false;
    for r in results {
        match r {
            Ok((g, kl_sum, n_tok, clipped)) => {
                parts.push(g);
                kl_acc += kl_sum;
                token_count += n_tok;
                clip_count += clipped;
            }
            Err(LastlabError::Training(_)) => {
                any_bad = true;
            }
            Err(e) => return Err(e),
        }
    }
    let kl = kl_acc / (token_count.max(1)) as f64;

    if any_bad {
        return Ok(IterStats {
            iter,
            mean_reward,
            reward_std,
            r_traj_mean,
            r_fmt_mean,
            r_goal_mean,
            kl,
            clip_frac: 0.0,
            fallback_rate,
            skipped: true,
        });
    }
    merge_grad_parts(&mut grads, parts);
    match cfg.optimizer {
        GrpoOptimizer::Adam => {
            opt.lr = cfg.learning_rate;
            opt.step(store, &grads);
        }
        GrpoOptimizer::Sgd => {
            sgd_step(store, &grads, cfg.learning_rate, &["adapter.".to_string()]);
        }
    }
    Ok(IterStats {
        iter,
        mean_reward,
        reward_std,
        r_traj_mean,
        r_fmt_mean,
        r_goal_mean,
        kl,
        clip_frac: clip_count as f64 / token_count.max(1) as f64,
        fallback_rate,
        skipped: false,
    })
}

fn merge_grad_parts(
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

/// Full refinement run from an SFT checkpoint; the reference policy is the
/// unmodified starting snapshot.
pub fn run_grpo(
    store: &mut ParamStore,
    ctx: &TrainContext,
    examples: &[TrainExample],
    cfg: &GrpoConfig,
    weights: &RewardWeights,
    tiers: &GoalTiers,
) -> Result<Vec<IterStats>, LastlabError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(LastlabError::Config("empty RL split".into()));
    }
    let ref_store = store.clone();
    let mut opt = Adam::new(cfg.learning_rate);
    opt.freeze_prefix("adapter.");
    // fixed scene order for the whole run
    let mut order: Vec<usize> = (0..examples.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut stream(cfg.seed, "grpo.scene_order", &[]));
    let mut stats = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch: Vec<&TrainExample> = (0..cfg.scenes_per_iter)
            .map(|j| &examples[order[(iter * cfg.scenes_per_iter + j) % order.len()]])
            .collect();
        let s = grpo_iteration(
            store, &ref_store, &mut opt, ctx, &batch, cfg, weights, tiers, iter,
        )?;
        stats.push(s);
    }
    Ok(stats)
}
