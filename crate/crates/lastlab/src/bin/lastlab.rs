//! Command-line entry point: dataset generation, SFT, GRPO refinement,
//! evaluation, reporting, and ablation sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lastlab::harness::ablation::{run_ablation, AblationAxis};
use lastlab::harness::commands::{
    cmd_eval, cmd_gen_data, cmd_report, cmd_rl, cmd_sft, CommandEnv,
};
use lastlab::harness::config::RunConfig;
use lastlab::LastlabError;

#[derive(Parser)]
#[command(name = "lastlab", version, about = "latent spatio-temporal planning micro-lab")]
struct Cli {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, repeatable: --set key=value
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; defaults to $LASTLAB_RUN_ROOT/run or ./runs/run.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Dataset directory; defaults to <run_dir>/data.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the easy/hard train splits and the held-out eval split.
    GenData,
    /// Two-phase supervised fine-tuning from fresh parameters.
    Sft,
    /// GRPO refinement from the SFT checkpoint.
    Rl,
    /// Score the latest checkpoint on the held-out split.
    Eval,
    /// Render a text summary of the run artifacts (read-only).
    Report,
    /// Run one ablation axis end to end (3 seeds per arm).
    Ablate {
        /// supervision | reasoning | mask | token_counts
        axis: String,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, LastlabError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                LastlabError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for assignment in &cli.set {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(LastlabError::Config(format!(
                "--set expects key=value, got {assignment:?}"
            )));
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_run_dir() -> PathBuf {
    let root = std::env::var("LASTLAB_RUN_ROOT").unwrap_or_else(|_| "runs".to_string());
    PathBuf::from(root).join("run")
}

fn run(cli: Cli) -> Result<(), LastlabError> {
    let config = build_config(&cli)?;
    let run_dir = cli.run_dir.clone().unwrap_or_else(default_run_dir);
    let env = CommandEnv::new(config, run_dir, cli.data_dir.clone());
    match &cli.command {
        Command::GenData => cmd_gen_data(&env),
        Command::Sft => cmd_sft(&env),
        Command::Rl => cmd_rl(&env),
        Command::Eval => cmd_eval(&env),
        Command::Report => {
            print!("{}", cmd_report(&env)?);
            Ok(())
        }
        Command::Ablate { axis } => {
            let axis = AblationAxis::parse(axis)?;
            let report = run_ablation(axis, &env.config)?;
            std::fs::create_dir_all(&env.run_dir)?;
            std::fs::write(
                env.run_dir.join("ablation.csv"),
                report.to_csv(&env.config.hash()),
            )?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ LastlabError::Config(_)) | Err(e @ LastlabError::Dataset(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ LastlabError::MissingCheckpoint(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
