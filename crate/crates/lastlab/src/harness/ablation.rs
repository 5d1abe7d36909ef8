//! Ablation arms over the mode flags and latent token counts: each arm runs
//! the full pipeline on identical seeds and reports per-seed micro-PDMS plus
//! medians.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::LastlabError;
use crate::harness::config::{Reasoning, RunConfig};
use crate::harness::run::{run_pipeline, DataBundle, EvalSummary};
use crate::policy::mask::MaskMode;

pub const ABLATION_SEEDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Supervision,
    Reasoning,
    Mask,
    TokenCounts,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self, LastlabError> {
        match s {
            "supervision" => Ok(Self::Supervision),
            "reasoning" => Ok(Self::Reasoning),
            "mask" => Ok(Self::Mask),
            "token_counts" => Ok(Self::TokenCounts),
            _ => Err(LastlabError::Config(format!(
                "unknown ablation axis {s:?} (supervision|reasoning|mask|token_counts)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub pdms: Vec<f64>,
    pub median_pdms: f64,
    pub summaries: Vec<EvalSummary>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub arms: Vec<ArmOutcome>,
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The arm list for an axis, as (name, config-delta) pairs applied to a base.
pub fn arms_for(axis: AblationAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut arms = Vec::new();
    match axis {
        AblationAxis::Supervision => {
            let mut with_sup = base.clone();
            with_sup.latent_supervision = true;
            with_sup.reasoning = Reasoning::Latent;
            arms.push(("latent_with_sup".to_string(), with_sup));
            let mut wo_sup = base.clone();
            wo_sup.latent_supervision = false;
            wo_sup.reasoning = Reasoning::Latent;
            arms.push(("latent_wo_sup".to_string(), wo_sup));
        }
        AblationAxis::Reasoning => {
            let mut latent = base.clone();
            latent.reasoning = Reasoning::Latent;
            arms.push(("latent".to_string(), latent));
            let mut none = base.clone();
            none.reasoning = Reasoning::None;
            none.latent_supervision = false;
            arms.push(("no_latent".to_string(), none));
        }
        AblationAxis::Mask => {
            let mut structured = base.clone();
            structured.mask = MaskMode::Structured;
            arms.push(("structured_mask".to_string(), structured));
            let mut standard = base.clone();
            standard.mask = MaskMode::Standard;
            arms.push(("standard_mask".to_string(), standard));
        }
        AblationAxis::TokenCounts => {
            // the latent-count grid: (wm per group, 3d)
            for (k_wm, k_3d) in [(12, 6), (12, 24), (6, 12), (24, 12), (12, 12)] {
                let mut cfg = base.clone();
                cfg.n_wm_tokens = k_wm;
                cfg.n_3d_tokens = k_3d;
                arms.push((format!("wm3x{k_wm}_3d{k_3d}"), cfg));
            }
        }
    }
    arms
}

/// Run every arm on the same seed set. Data bundles are shared between arms
/// with identical teacher shapes; a crashing arm is reported, not fatal.
pub fn run_ablation(axis: AblationAxis, base: &RunConfig) -> Result<AblationReport, LastlabError> {
    let arms = arms_for(axis, base);
    let mut bundles: BTreeMap<(usize, usize), DataBundle> = BTreeMap::new();
    let mut outcomes = Vec::new();
    for (name, cfg) in arms {
        let key = (cfg.n_3d_tokens, cfg.n_wm_tokens);
        if !bundles.contains_key(&key) {
            bundles.insert(key, DataBundle::generate(&cfg)?);
        }
        let bundle = &bundles[&key];
        let mut pdms = Vec::new();
        let mut summaries = Vec::new();
        let mut seeds = Vec::new();
        let mut failure = None;
        for k in 0..ABLATION_SEEDS as u64 {
            let mut arm_cfg = cfg.clone();
            arm_cfg.seed = base.seed + k;
            seeds.push(arm_cfg.seed);
            match run_pipeline(&arm_cfg, bundle) {
                Ok(result) => {
                    pdms.push(result.summary.mean_pdms);
                    summaries.push(result.summary);
                }
                Err(e) => {
                    failure = Some(format!("seed {}: {e}", arm_cfg.seed));
                    break;
                }
            }
        }
        let median_pdms = if pdms.is_empty() { f64::NAN } else { median(&pdms) };
        outcomes.push(ArmOutcome {
            arm: name,
            seeds,
            pdms,
            median_pdms,
            summaries,
            failure,
        });
    }
    Ok(AblationReport {
        axis: format!("{axis:?}"),
        arms: outcomes,
    })
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("ablation axis: {}\n", self.axis));
        out.push_str(&format!(
            "{:<20} {:>10} {:>30} {:>8}\n",
            "arm", "median", "per-seed micro-PDMS", "status"
        ));
        for arm in &self.arms {
            let per_seed = arm
                .pdms
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "{:<20} {:>10} {:>30} {:>8}\n",
                arm.arm,
                if arm.median_pdms.is_nan() {
                    "-".to_string()
                } else {
                    format!("{:.4}", arm.median_pdms)
                },
                per_seed,
                if arm.failure.is_some() { "FAILED" } else { "ok" }
            ));
            if let Some(f) = &arm.failure {
                out.push_str(&format!("    failure: {f}\n"));
            }
        }
        out
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\n# axis={}\n", self.axis);
        out.push_str("arm,seed,pdms,epdms,nc,dac,ttc,cf,ep,fallback_rate,status\n");
        for arm in &self.arms {
            for (i, seed) in arm.seeds.iter().enumerate() {
                if let Some(s) = arm.summaries.get(i) {
                    out.push_str(&format!(
                        "{},{seed},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},ok\n",
                        arm.arm,
                        s.mean_pdms,
                        s.mean_epdms,
                        s.mean_nc,
                        s.mean_dac,
                        s.mean_ttc,
                        s.mean_cf,
                        s.mean_ep,
                        s.fallback_rate
                    ));
                } else {
                    out.push_str(&format!("{},{seed},,,,,,,,,failed\n", arm.arm));
                }
            }
            out.push_str(&format!(
                "{},median,{:?},,,,,,,,{}\n",
                arm.arm,
                arm.median_pdms,
                if arm.failure.is_some() { "failed" } else { "ok" }
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn arm_construction_covers_the_grids() {
        let base = RunConfig::default();
        assert_eq!(arms_for(AblationAxis::Supervision, &base).len(), 2);
        assert_eq!(arms_for(AblationAxis::Reasoning, &base).len(), 2);
        assert_eq!(arms_for(AblationAxis::Mask, &base).len(), 2);
        let tc = arms_for(AblationAxis::TokenCounts, &base);
        assert_eq!(tc.len(), 5);
        for (_, cfg) in &tc {
            assert!(cfg.validate().is_ok());
        }
        // supervision-off arm stays valid
        for axis in [AblationAxis::Supervision, AblationAxis::Reasoning, AblationAxis::Mask] {
            for (_, cfg) in arms_for(axis, &base) {
                cfg.validate().unwrap();
            }
        }
    }
}
