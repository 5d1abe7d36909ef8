//! Command implementations behind the CLI: dataset generation, the two
//! training stages, evaluation, and report rendering.

use std::path::{Path, PathBuf};

use crate::error::LastlabError;
use crate::harness::artifacts::{plot_svg, write_meta, write_rl_log, write_training_log};
use crate::harness::config::RunConfig;
use crate::harness::run::{evaluate, write_eval_csv, DataBundle, PipelineResult};
use crate::math::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::microworld::dataset::{read_dataset, write_dataset, SceneExample};
use crate::sft::{run_sft, SftPhase};
use crate::tokenizer::Vocabulary;

pub struct CommandEnv {
    pub config: RunConfig,
    pub run_dir: PathBuf,
    pub data_dir: PathBuf,
}

impl CommandEnv {
    pub fn new(config: RunConfig, run_dir: PathBuf, data_dir: Option<PathBuf>) -> Self {
        let data_dir = data_dir.unwrap_or_else(|| run_dir.join("data"));
        Self {
            config,
            run_dir,
            data_dir,
        }
    }

    fn prepare_dirs(&self) -> Result<(), LastlabError> {
        std::fs::create_dir_all(&self.run_dir)?;
        std::fs::create_dir_all(self.run_dir.join("plots"))?;
        Ok(())
    }

    fn snapshot_config(&self) -> Result<(), LastlabError> {
        std::fs::write(self.run_dir.join("config.lastlab"), self.config.canonical())?;
        std::fs::write(
            self.run_dir.join("vocab.txt"),
            Vocabulary::new().to_file_string(),
        )?;
        Ok(())
    }
}

fn load_split(env: &CommandEnv, name: &str) -> Result<Vec<SceneExample>, LastlabError> {
    let path = env.data_dir.join(format!("{name}.jsonl"));
    let (header, examples) = read_dataset(&path)?;
    if header.k_geo != env.config.n_3d_tokens || header.k_wm != env.config.n_wm_tokens {
        return Err(LastlabError::Dataset(format!(
            "{name}: dataset teacher shape (k_geo={}, k_wm={}) does not match config ({}, {})",
            header.k_geo, header.k_wm, env.config.n_3d_tokens, env.config.n_wm_tokens
        )));
    }
    Ok(examples)
}

/// `gen-data`: write the easy/hard train splits and the held-out eval split.
pub fn cmd_gen_data(env: &CommandEnv) -> Result<(), LastlabError> {
    env.prepare_dirs()?;
    std::fs::create_dir_all(&env.data_dir)?;
    env.snapshot_config()?;
    let bundle = DataBundle::generate(&env.config)?;
    let hash = env.config.hash();
    let (k_geo, k_wm) = (env.config.n_3d_tokens, env.config.n_wm_tokens);
    write_dataset(&env.data_dir.join("easy.jsonl"), &bundle.easy, "easy", &hash, k_geo, k_wm)?;
    write_dataset(&env.data_dir.join("hard.jsonl"), &bundle.hard, "hard", &hash, k_geo, k_wm)?;
    write_dataset(&env.data_dir.join("eval.jsonl"), &bundle.eval, "eval", &hash, k_geo, k_wm)?;
    write_meta(&env.run_dir, "gen-data", &hash)?;
    println!(
        "wrote {} easy / {} hard / {} eval scenes under {}",
        bundle.easy.len(),
        bundle.hard.len(),
        bundle.eval.len(),
        env.data_dir.display()
    );
    Ok(())
}

/// `sft`: two-phase supervised fine-tuning from fresh parameters.
pub fn cmd_sft(env: &CommandEnv) -> Result<(), LastlabError> {
    env.prepare_dirs()?;
    env.snapshot_config()?;
    let cfg = &env.config;
    let ctx = cfg.train_context();
    let easy = load_split(env, "easy")?;
    let hard = load_split(env, "hard")?;
    let bundle = DataBundle {
        easy,
        hard,
        eval: Vec::new(),
    };
    let conv = |src: &[SceneExample]| -> Result<Vec<_>, LastlabError> {
        src.iter()
            .map(|e| crate::sft::TrainExample::from_example(&ctx.vocab, e))
            .collect()
    };
    let hard_ex = conv(&bundle.hard)?;
    let mut full_ex = conv(&bundle.easy)?;
    full_ex.extend(hard_ex.iter().cloned());
    let mut store = crate::policy::model::init_policy_params(&ctx.model, &ctx.vocab, cfg.seed);
    crate::adapters::init_adapter_params(&mut store, &ctx.adapter, cfg.seed);
    let log = run_sft(
        &mut store,
        &ctx,
        &hard_ex,
        &full_ex,
        &cfg.sft_phase_config(SftPhase::Phase1),
        &cfg.sft_phase_config(SftPhase::Phase2),
    )?;
    let hash = cfg.hash();
    save_checkpoint(&env.run_dir.join("ckpt_sft.json"), &store, &cfg.canonical(), &hash)?;
    write_training_log(&env.run_dir.join("training_log.csv"), &hash, &log)?;
    plot_svg(
        &env.run_dir.join("plots/loss_curve.svg"),
        "sft losses",
        &[
            ("ce", log.iter().map(|r| r.ce).collect()),
            ("l_wm", log.iter().map(|r| r.l_wm).collect()),
            ("l_3d", log.iter().map(|r| r.l_3d).collect()),
        ],
    )?;
    write_meta(&env.run_dir, "sft", &hash)?;
    if let Some(last) = log.last() {
        println!(
            "sft finished after {} steps: ce={:.4} l_wm={:.4} l_3d={:.4}",
            log.len(),
            last.ce,
            last.l_wm,
            last.l_3d
        );
    }
    Ok(())
}

/// `rl`: GRPO refinement from the SFT checkpoint.
pub fn cmd_rl(env: &CommandEnv) -> Result<(), LastlabError> {
    env.prepare_dirs()?;
    env.snapshot_config()?;
    let cfg = &env.config;
    let ctx = cfg.train_context();
    let (mut store, _, _) = load_checkpoint(&env.run_dir.join("ckpt_sft.json"))?;
    let hard = load_split(env, "hard")?;
    let hard_ex: Vec<_> = hard
        .iter()
        .map(|e| crate::sft::TrainExample::from_example(&ctx.vocab, e))
        .collect::<Result<_, _>>()?;
    let stats = crate::grpo::run_grpo(
        &mut store,
        &ctx,
        &hard_ex,
        &cfg.grpo_config(),
        &cfg.reward_weights(),
        &cfg.goal_tiers(),
    )?;
    let hash = cfg.hash();
    save_checkpoint(&env.run_dir.join("ckpt_rl.json"), &store, &cfg.canonical(), &hash)?;
    write_rl_log(&env.run_dir.join("rl_log.csv"), &hash, &stats)?;
    plot_svg(
        &env.run_dir.join("plots/reward_curve.svg"),
        "mean reward per iteration",
        &[("mean_reward", stats.iter().map(|s| s.mean_reward).collect())],
    )?;
    write_meta(&env.run_dir, "rl", &hash)?;
    if let (Some(first), Some(best)) = (
        stats.first(),
        stats
            .iter()
            .max_by(|a, b| a.mean_reward.partial_cmp(&b.mean_reward).unwrap()),
    ) {
        println!(
            "rl finished: mean reward {:.3} -> best {:.3} over {} iterations",
            first.mean_reward,
            best.mean_reward,
            stats.len()
        );
    }
    Ok(())
}

fn pick_checkpoint(env: &CommandEnv) -> Result<(ParamStore, PathBuf), LastlabError> {
    for name in ["ckpt_rl.json", "ckpt_sft.json"] {
        let p = env.run_dir.join(name);
        if p.exists() {
            let (store, _, _) = load_checkpoint(&p)?;
            return Ok((store, p));
        }
    }
    Err(LastlabError::MissingCheckpoint(format!(
        "no ckpt_rl.json or ckpt_sft.json under {}",
        env.run_dir.display()
    )))
}

/// `eval`: greedy-plan the latest checkpoint over the held-out split.
pub fn cmd_eval(env: &CommandEnv) -> Result<(), LastlabError> {
    env.prepare_dirs()?;
    let cfg = &env.config;
    let ctx = cfg.train_context();
    let (store, ckpt_path) = pick_checkpoint(env)?;
    let eval_split = load_split(env, "eval")?;
    let eval_ex: Vec<_> = eval_split
        .iter()
        .map(|e| crate::sft::TrainExample::from_example(&ctx.vocab, e))
        .collect::<Result<_, _>>()?;
    let (rows, summary) = evaluate(&store, &ctx, &eval_ex, &cfg.metric_config())?;
    let hash = cfg.hash();
    write_eval_csv(&env.run_dir.join("eval.csv"), &hash, &rows, &summary)?;
    write_meta(&env.run_dir, "eval", &hash)?;
    println!(
        "evaluated {} scenes from {}: micro-PDMS {:.4}, EPDMS {:.4}, fallback rate {:.2}",
        summary.count,
        ckpt_path.display(),
        summary.mean_pdms,
        summary.mean_epdms,
        summary.fallback_rate
    );
    if summary.fallback_rate > 0.2 {
        println!(
            "warning: high fallback rate ({:.0}% of plans failed to parse)",
            summary.fallback_rate * 100.0
        );
    }
    Ok(())
}

/// `report`: render a text summary of whatever artifacts exist. Read-only.
pub fn cmd_report(env: &CommandEnv) -> Result<String, LastlabError> {
    let mut out = String::new();
    out.push_str(&format!("run: {}\n", env.run_dir.display()));
    out.push_str(&format!("config hash: {}\n", env.config.hash()));
    let read_last_csv_row = |path: &Path| -> Option<(Vec<String>, Vec<String>)> {
        let text = std::fs::read_to_string(path).ok()?;
        let mut header = None;
        let mut last = None;
        for line in text.lines() {
            if line.starts_with('#') {
                continue;
            }
            if header.is_none() {
                header = Some(line.split(',').map(String::from).collect());
            } else {
                last = Some(line.split(',').map(String::from).collect());
            }
        }
        Some((header?, last?))
    };
    let tl = env.run_dir.join("training_log.csv");
    if let Some((h, r)) = read_last_csv_row(&tl) {
        out.push_str("sft (final step): ");
        for (k, v) in h.iter().zip(&r) {
            out.push_str(&format!("{k}={v} "));
        }
        out.push('\n');
    }
    let rl = env.run_dir.join("rl_log.csv");
    if rl.exists() {
        let text = std::fs::read_to_string(&rl)?;
        let mut first = None;
        let mut best: Option<f64> = None;
        for line in text.lines().skip_while(|l| l.starts_with('#')).skip(1) {
            if let Some(v) = line.split(',').nth(1).and_then(|s| s.parse::<f64>().ok()) {
                if first.is_none() {
                    first = Some(v);
                }
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        if let (Some(f), Some(b)) = (first, best) {
            out.push_str(&format!(
                "rl: mean reward {f:.3} at iteration 0, best {b:.3} ({:+.1}% relative)\n",
                (b - f) / f.abs().max(1e-9) * 100.0
            ));
        }
    }
    let ev = env.run_dir.join("eval.csv");
    if let Some((h, r)) = read_last_csv_row(&ev) {
        out.push_str("eval (summary row): ");
        for (k, v) in h.iter().zip(&r) {
            if v != "-" {
                out.push_str(&format!("{k}={v} "));
            }
        }
        out.push('\n');
    }
    if !tl.exists() && !rl.exists() && !ev.exists() {
        out.push_str("no artifacts yet; run gen-data / sft / rl / eval first\n");
    }
    Ok(out)
}

/// Writes the standard artifact set for an in-memory pipeline result; used by
/// the ablation runner so each arm leaves a full run directory.
pub fn write_pipeline_artifacts(
    dir: &Path,
    cfg: &RunConfig,
    result: &PipelineResult,
) -> Result<(), LastlabError> {
    std::fs::create_dir_all(dir.join("plots"))?;
    let hash = cfg.hash();
    std::fs::write(dir.join("config.lastlab"), cfg.canonical())?;
    save_checkpoint(&dir.join("ckpt_rl.json"), &result.store, &cfg.canonical(), &hash)?;
    write_training_log(&dir.join("training_log.csv"), &hash, &result.sft_log)?;
    write_rl_log(&dir.join("rl_log.csv"), &hash, &result.rl_log)?;
    write_eval_csv(&dir.join("eval.csv"), &hash, &result.eval_rows, &result.summary)?;
    plot_svg(
        &dir.join("plots/loss_curve.svg"),
        "sft losses",
        &[
            ("ce", result.sft_log.iter().map(|r| r.ce).collect()),
            ("l_wm", result.sft_log.iter().map(|r| r.l_wm).collect()),
            ("l_3d", result.sft_log.iter().map(|r| r.l_3d).collect()),
        ],
    )?;
    plot_svg(
        &dir.join("plots/reward_curve.svg"),
        "mean reward per iteration",
        &[(
            "mean_reward",
            result.rl_log.iter().map(|s| s.mean_reward).collect(),
        )],
    )?;
    write_meta(dir, "pipeline", &hash)?;
    Ok(())
}
