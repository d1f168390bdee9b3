use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use l2d_cli::commands::CHECKPOINT_FILE;
use l2d_cli::{run_ablate, run_eval, run_mi_bench, run_train, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "l2d",
    version,
    about = "Style-diversified training on one source domain, evaluated on shifted domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key = value config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write the checkpoint, metrics and resolved config.
    Train(Common),
    /// Evaluate a checkpoint on the source test split and the shifted suite.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `model.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// CLUB estimates on correlated Gaussians against the analytic MI.
    MiBench {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train and evaluate all five variants under one budget.
    Ablate(Common),
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let (cfg, defaulted) = ExperimentConfig::load(path)?;
            if !defaulted.is_empty() {
                log::info!("defaults used for: {}", defaulted.join(", "));
            }
            cfg
        }
        None => {
            log::info!("no config given; using defaults");
            ExperimentConfig::default()
        }
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("L2D_THREADS") {
        let n: usize = v.parse().with_context(|| format!("L2D_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            let out = run_train(&cfg)?;
            let acc = out.metrics.series("train", "accuracy");
            log::info!("done; final training accuracy {:.4}", acc.last().copied().unwrap_or(f64::NAN));
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let report = run_eval(&cfg, &ckpt)?;
            println!("{}", report.to_csv().trim_end());
        }
        Command::MiBench { seed, out } => {
            let rows = run_mi_bench(seed, Path::new(&out))?;
            println!("{}", l2d_cli::commands::mi_table_csv(&rows).trim_end());
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common)?;
            let rows = run_ablate(&cfg)?;
            println!("{}", l2d_cli::commands::ablation_csv(&rows).trim_end());
        }
    }
    Ok(())
}
