//! Flat, human-editable run configuration with typed validation, a canonical
//! serialization, and a stable hash that stamps every artifact.

use sha2::{Digest, Sha256};

use crate::adapters::AdapterConfig;
use crate::error::LastlabError;
use crate::grpo::{GoalTiers, GrpoConfig, GrpoOptimizer, RewardWeights};
use crate::metrics::MetricConfig;
use crate::policy::layout::LatentSpec;
use crate::policy::mask::MaskMode;
use crate::policy::model::ModelConfig;
use crate::sft::{SftConfig, SftPhase, TrainContext};
use crate::tokenizer::Vocabulary;

pub const CONFIG_FORMAT: &str = "lastlab-config-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reasoning {
    Latent,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // model
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub n_3d_tokens: usize,
    pub n_wm_tokens: usize,
    pub n_wm_groups: usize,
    pub d_teacher: usize,
    // modes
    pub latent_supervision: bool,
    pub reasoning: Reasoning,
    pub mask: MaskMode,
    // training
    pub mask_ratio: f64,
    pub sft_lr: f64,
    pub sft_batch_size: usize,
    pub sft_grad_accum: usize,
    pub sft_phase1_epochs: usize,
    pub sft_phase2_epochs: usize,
    pub sft_phase1_max_steps: usize,
    pub sft_phase2_max_steps: usize,
    // grpo
    pub grpo_group_size: usize,
    pub grpo_temperature: f64,
    pub grpo_clip_eps: f64,
    pub grpo_kl_beta: f64,
    pub grpo_lr: f64,
    pub grpo_iterations: usize,
    pub grpo_scenes_per_iter: usize,
    pub grpo_optimizer: GrpoOptimizer,
    // rewards
    pub reward_traj_weight: f64,
    pub reward_fmt_weight: f64,
    pub reward_goal_weight: f64,
    pub goal_tiers: [(f64, f64); 3],
    // data
    pub data_easy_n: usize,
    pub data_hard_n: usize,
    pub data_eval_n: usize,
    // metric thresholds
    pub metric_dt: f64,
    pub ttc_horizon: f64,
    pub comfort_accel_max: f64,
    pub comfort_jerk_max: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 384,
            n_3d_tokens: 12,
            n_wm_tokens: 12,
            n_wm_groups: 3,
            d_teacher: 32,
            latent_supervision: true,
            reasoning: Reasoning::Latent,
            mask: MaskMode::Structured,
            mask_ratio: 0.5,
            sft_lr: 3e-4,
            sft_batch_size: 4,
            sft_grad_accum: 1,
            sft_phase1_epochs: 2,
            sft_phase2_epochs: 2,
            sft_phase1_max_steps: 0,
            sft_phase2_max_steps: 0,
            grpo_group_size: 8,
            grpo_temperature: 2.0,
            grpo_clip_eps: 0.2,
            grpo_kl_beta: 0.1,
            grpo_lr: 1e-5,
            grpo_iterations: 100,
            grpo_scenes_per_iter: 2,
            grpo_optimizer: GrpoOptimizer::Adam,
            reward_traj_weight: 8.0,
            reward_fmt_weight: 1.0,
            reward_goal_weight: 1.0,
            goal_tiers: [(0.5, 1.0), (1.0, 0.5), (2.0, 0.25)],
            data_easy_n: 100,
            data_hard_n: 200,
            data_eval_n: 100,
            metric_dt: 0.1,
            ttc_horizon: 1.0,
            comfort_accel_max: 4.0,
            comfort_jerk_max: 8.0,
        }
    }
}

fn parse_u64(key: &str, v: &str) -> Result<u64, LastlabError> {
    v.parse()
        .map_err(|_| LastlabError::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, LastlabError> {
    v.parse()
        .map_err(|_| LastlabError::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, LastlabError> {
    v.parse()
        .map_err(|_| LastlabError::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_on_off(key: &str, v: &str) -> Result<bool, LastlabError> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(LastlabError::Config(format!(
            "{key}: expected on|off, got {v:?}"
        ))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), LastlabError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "d_model" => self.d_model = parse_usize(key, v)?,
            "n_layers" => self.n_layers = parse_usize(key, v)?,
            "n_heads" => self.n_heads = parse_usize(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_usize(key, v)?,
            "n_3d_tokens" => self.n_3d_tokens = parse_usize(key, v)?,
            "n_wm_tokens" => self.n_wm_tokens = parse_usize(key, v)?,
            "n_wm_groups" => self.n_wm_groups = parse_usize(key, v)?,
            "d_teacher" => self.d_teacher = parse_usize(key, v)?,
            "latent_supervision" => self.latent_supervision = parse_on_off(key, v)?,
            "reasoning" => {
                self.reasoning = match v {
                    "latent" => Reasoning::Latent,
                    "none" => Reasoning::None,
                    _ => {
                        return Err(LastlabError::Config(format!(
                            "reasoning: expected latent|none, got {v:?}"
                        )))
                    }
                }
            }
            "mask" => {
                self.mask = match v {
                    "structured" => MaskMode::Structured,
                    "standard" => MaskMode::Standard,
                    _ => {
                        return Err(LastlabError::Config(format!(
                            "mask: expected structured|standard, got {v:?}"
                        )))
                    }
                }
            }
            "mask_ratio" => self.mask_ratio = parse_f64(key, v)?,
            "sft_lr" => self.sft_lr = parse_f64(key, v)?,
            "sft_batch_size" => self.sft_batch_size = parse_usize(key, v)?,
            "sft_grad_accum" => self.sft_grad_accum = parse_usize(key, v)?,
            "sft_phase1_epochs" => self.sft_phase1_epochs = parse_usize(key, v)?,
            "sft_phase2_epochs" => self.sft_phase2_epochs = parse_usize(key, v)?,
            "sft_phase1_max_steps" => self.sft_phase1_max_steps = parse_usize(key, v)?,
            "sft_phase2_max_steps" => self.sft_phase2_max_steps = parse_usize(key, v)?,
            "grpo_group_size" => self.grpo_group_size = parse_usize(key, v)?,
            "grpo_temperature" => self.grpo_temperature = parse_f64(key, v)?,
            "grpo_clip_eps" => self.grpo_clip_eps = parse_f64(key, v)?,
            "grpo_kl_beta" => self.grpo_kl_beta = parse_f64(key, v)?,
            "grpo_lr" => self.grpo_lr = parse_f64(key, v)?,
            "grpo_iterations" => self.grpo_iterations = parse_usize(key, v)?,
            "grpo_scenes_per_iter" => self.grpo_scenes_per_iter = parse_usize(key, v)?,
            "grpo_optimizer" => {
                self.grpo_optimizer = match v {
                    "adam" => GrpoOptimizer::Adam,
                    "sgd" => GrpoOptimizer::Sgd,
                    _ => {
                        return Err(LastlabError::Config(format!(
                            "grpo_optimizer: expected adam|sgd, got {v:?}"
                        )))
                    }
                }
            }
            "reward_traj_weight" => self.reward_traj_weight = parse_f64(key, v)?,
            "reward_fmt_weight" => self.reward_fmt_weight = parse_f64(key, v)?,
            "reward_goal_weight" => self.reward_goal_weight = parse_f64(key, v)?,
            "goal_tier_1_m" => self.goal_tiers[0].0 = parse_f64(key, v)?,
            "goal_tier_1_reward" => self.goal_tiers[0].1 = parse_f64(key, v)?,
            "goal_tier_2_m" => self.goal_tiers[1].0 = parse_f64(key, v)?,
            "goal_tier_2_reward" => self.goal_tiers[1].1 = parse_f64(key, v)?,
            "goal_tier_3_m" => self.goal_tiers[2].0 = parse_f64(key, v)?,
            "goal_tier_3_reward" => self.goal_tiers[2].1 = parse_f64(key, v)?,
            "data_easy_n" => self.data_easy_n = parse_usize(key, v)?,
            "data_hard_n" => self.data_hard_n = parse_usize(key, v)?,
            "data_eval_n" => self.data_eval_n = parse_usize(key, v)?,
            "metric_dt" => self.metric_dt = parse_f64(key, v)?,
            "ttc_horizon" => self.ttc_horizon = parse_f64(key, v)?,
            "comfort_accel_max" => self.comfort_accel_max = parse_f64(key, v)?,
            "comfort_jerk_max" => self.comfort_jerk_max = parse_f64(key, v)?,
            _ => {
                return Err(LastlabError::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parse a config file body: `key = value` lines, `#` comments, blank
    /// lines, optional format tag on the first line.
    pub fn parse(text: &str) -> Result<Self, LastlabError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line == CONFIG_FORMAT {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(LastlabError::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LastlabError> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model: {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            problems.push("n_layers: must be positive".into());
        }
        if self.reasoning == Reasoning::Latent
            && (self.n_3d_tokens == 0 || self.n_wm_tokens == 0 || self.n_wm_groups == 0)
        {
            problems.push("n_3d_tokens/n_wm_tokens/n_wm_groups: must be positive with latent reasoning".into());
        }
        if self.reasoning == Reasoning::None && self.latent_supervision {
            problems.push("latent_supervision: on requires reasoning = latent".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            problems.push(format!("mask_ratio: {} outside [0, 1)", self.mask_ratio));
        }
        if self.sft_lr <= 0.0 {
            problems.push("sft_lr: must be positive".into());
        }
        if self.sft_batch_size == 0 || self.sft_grad_accum == 0 {
            problems.push("sft_batch_size/sft_grad_accum: must be positive".into());
        }
        if self.grpo_group_size < 2 {
            problems.push("grpo_group_size: must be >= 2".into());
        }
        if self.grpo_temperature <= 0.0 {
            problems.push("grpo_temperature: must be positive".into());
        }
        if !(self.grpo_clip_eps > 0.0) {
            problems.push("grpo_clip_eps: must be positive".into());
        }
        if self.grpo_kl_beta < 0.0 {
            problems.push("grpo_kl_beta: must be >= 0".into());
        }
        if self.metric_dt <= 0.0 || self.ttc_horizon <= 0.0 {
            problems.push("metric_dt/ttc_horizon: must be positive".into());
        }
        let seq_budget = 64 + 80 + (self.n_wm_tokens * self.n_wm_groups + 2) + (self.n_3d_tokens + 2) + 100;
        if self.reasoning == Reasoning::Latent && seq_budget > self.max_seq_len {
            problems.push(format!(
                "max_seq_len: {} too small for the latent token counts (need about {seq_budget})",
                self.max_seq_len
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LastlabError::Config(problems.join("; ")))
        }
    }

    fn mode_str(&self) -> (&'static str, &'static str, &'static str, &'static str) {
        (
            if self.latent_supervision { "on" } else { "off" },
            match self.reasoning {
                Reasoning::Latent => "latent",
                Reasoning::None => "none",
            },
            match self.mask {
                MaskMode::Structured => "structured",
                MaskMode::Standard => "standard",
            },
            match self.grpo_optimizer {
                GrpoOptimizer::Adam => "adam",
                GrpoOptimizer::Sgd => "sgd",
            },
        )
    }

    /// Canonical serialization: format tag, then sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let (sup, reasoning, mask, optimizer) = self.mode_str();
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("n_3d_tokens".into(), self.n_3d_tokens.to_string()),
            ("n_wm_tokens".into(), self.n_wm_tokens.to_string()),
            ("n_wm_groups".into(), self.n_wm_groups.to_string()),
            ("d_teacher".into(), self.d_teacher.to_string()),
            ("latent_supervision".into(), sup.into()),
            ("reasoning".into(), reasoning.into()),
            ("mask".into(), mask.into()),
            ("mask_ratio".into(), format!("{:?}", self.mask_ratio)),
            ("sft_lr".into(), format!("{:?}", self.sft_lr)),
            ("sft_batch_size".into(), self.sft_batch_size.to_string()),
            ("sft_grad_accum".into(), self.sft_grad_accum.to_string()),
            ("sft_phase1_epochs".into(), self.sft_phase1_epochs.to_string()),
            ("sft_phase2_epochs".into(), self.sft_phase2_epochs.to_string()),
            ("sft_phase1_max_steps".into(), self.sft_phase1_max_steps.to_string()),
            ("sft_phase2_max_steps".into(), self.sft_phase2_max_steps.to_string()),
            ("grpo_group_size".into(), self.grpo_group_size.to_string()),
            ("grpo_temperature".into(), format!("{:?}", self.grpo_temperature)),
            ("grpo_clip_eps".into(), format!("{:?}", self.grpo_clip_eps)),
            ("grpo_kl_beta".into(), format!("{:?}", self.grpo_kl_beta)),
            ("grpo_lr".into(), format!("{:?}", self.grpo_lr)),
            ("grpo_iterations".into(), self.grpo_iterations.to_string()),
            ("grpo_scenes_per_iter".into(), self.grpo_scenes_per_iter.to_string()),
            ("grpo_optimizer".into(), optimizer.into()),
            ("reward_traj_weight".into(), format!("{:?}", self.reward_traj_weight)),
            ("reward_fmt_weight".into(), format!("{:?}", self.reward_fmt_weight)),
            ("reward_goal_weight".into(), format!("{:?}", self.reward_goal_weight)),
            ("goal_tier_1_m".into(), format!("{:?}", self.goal_tiers[0].0)),
            ("goal_tier_1_reward".into(), format!("{:?}", self.goal_tiers[0].1)),
            ("goal_tier_2_m".into(), format!("{:?}", self.goal_tiers[1].0)),
            ("goal_tier_2_reward".into(), format!("{:?}", self.goal_tiers[1].1)),
            ("goal_tier_3_m".into(), format!("{:?}", self.goal_tiers[2].0)),
            ("goal_tier_3_reward".into(), format!("{:?}", self.goal_tiers[2].1)),
            ("data_easy_n".into(), self.data_easy_n.to_string()),
            ("data_hard_n".into(), self.data_hard_n.to_string()),
            ("data_eval_n".into(), self.data_eval_n.to_string()),
            ("metric_dt".into(), format!("{:?}", self.metric_dt)),
            ("ttc_horizon".into(), format!("{:?}", self.ttc_horizon)),
            ("comfort_accel_max".into(), format!("{:?}", self.comfort_accel_max)),
            ("comfort_jerk_max".into(), format!("{:?}", self.comfort_jerk_max)),
        ];
        kv.sort();
        let mut out = String::from(CONFIG_FORMAT);
        out.push('\n');
        for (k, v) in kv {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// First 16 hex chars of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn latent_spec(&self) -> Option<LatentSpec> {
        match self.reasoning {
            Reasoning::Latent => Some(LatentSpec {
                k_geo: self.n_3d_tokens,
                k_wm: self.n_wm_tokens,
                wm_groups: self.n_wm_groups,
            }),
            Reasoning::None => None,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            latent: self.latent_spec(),
        }
    }

    pub fn train_context(&self) -> TrainContext {
        TrainContext {
            model: self.model_config(),
            adapter: AdapterConfig {
                d_model: self.d_model,
                n_heads: self.n_heads,
                d_teacher: self.d_teacher,
            },
            mask_mode: self.mask,
            mask_ratio: self.mask_ratio,
            latent_supervision: self.latent_supervision,
            vocab: Vocabulary::new(),
        }
    }

    pub fn sft_phase_config(&self, phase: SftPhase) -> SftConfig {
        let (epochs, max_steps) = match phase {
            SftPhase::Phase1 => (self.sft_phase1_epochs, self.sft_phase1_max_steps),
            SftPhase::Phase2 => (self.sft_phase2_epochs, self.sft_phase2_max_steps),
        };
        SftConfig {
            phase,
            epochs,
            max_steps,
            learning_rate: self.sft_lr,
            batch_size: self.sft_batch_size,
            grad_accum: self.sft_grad_accum,
            seed: self.seed,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.grpo_group_size,
            temperature: self.grpo_temperature,
            clip_eps: self.grpo_clip_eps,
            kl_beta: self.grpo_kl_beta,
            learning_rate: self.grpo_lr,
            iterations: self.grpo_iterations,
            scenes_per_iter: self.grpo_scenes_per_iter,
            seed: self.seed,
            optimizer: self.grpo_optimizer,
        }
    }

    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            traj: self.reward_traj_weight,
            fmt: self.reward_fmt_weight,
            goal: self.reward_goal_weight,
        }
    }

    pub fn goal_tiers(&self) -> GoalTiers {
        GoalTiers {
            tiers: self.goal_tiers.to_vec(),
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            dt: self.metric_dt,
            ttc_horizon: self.ttc_horizon,
            accel_max: self.comfort_accel_max,
            jerk_max: self.comfort_jerk_max,
        }
    }
}
