use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use s4t_cli::{commands, usage, UsageError};
use s4t_core::config::AdaptConfig;

#[derive(Parser)]
#[command(name = "s4t", about = "Self-training domain adaptation for a compact segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a config key, e.g. --set lr=0.002 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain segmentation benchmark.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Number of source-domain images.
        #[arg(long, default_value_t = 500)]
        n_source: usize,
        /// Number of target-domain images.
        #[arg(long, default_value_t = 500)]
        n_target: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the segmenter on labeled source images.
    TrainSource {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Adapt a source checkpoint to unlabeled target images.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint with multi-scale inference.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Report pseudolabel reliability statistics for a checkpoint.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a named configuration sweep (table4, noisy_oracle, k_sweep,
    /// selection_modes, all_params).
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Suite name.
        suite: String,
    },
}

fn build_config(run: &RunArgs) -> Result<AdaptConfig> {
    let mut cfg = match &run.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            AdaptConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => AdaptConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    for pair in &run.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(key.trim(), value.trim()).map_err(|e| usage(format!("--set {pair}: {e}")))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { run, n_source, n_target, size } => {
            let cfg = build_config(&run)?;
            commands::cmd_gen_data(&run.out, cfg.seed, n_source, n_target, size)
        }
        Command::TrainSource { run } => {
            let cfg = build_config(&run)?;
            commands::cmd_train_source(&cfg, &run.out)
        }
        Command::Adapt { run } => {
            let cfg = build_config(&run)?;
            commands::cmd_adapt(&cfg, &run.out)
        }
        Command::Eval { run } => {
            let cfg = build_config(&run)?;
            commands::cmd_eval(&cfg, &run.out)
        }
        Command::Analyze { run } => {
            let cfg = build_config(&run)?;
            commands::cmd_analyze(&cfg, &run.out)
        }
        Command::Ablate { run, suite } => {
            let cfg = build_config(&run)?;
            commands::cmd_ablate(&cfg, &run.out, &suite)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
