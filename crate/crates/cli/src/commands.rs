use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use l2d_core::checkpoint::{write_atomic, Checkpoint};
use l2d_core::data::{apply_shift, load_idx, make_eval_suite, LabeledDataset};
use l2d_core::objectives::{club_oracle, gaussian_mi, FitConfig};
use l2d_core::rng::SeedTree;
use l2d_core::trainer::{evaluate, load_task_model, train, Ablation, EvalReport, TrainOutcome};

use crate::config::ExperimentConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SNAPSHOT_FILE: &str = "config.resolved";
pub const MI_BENCH_FILE: &str = "mi_bench.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

pub const MI_BENCH_RHOS: [f64; 3] = [0.0, 0.3, 0.8];
pub const MI_BENCH_PAIRS: usize = 4096;
pub const MI_BENCH_DIM: usize = 8;

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(name);
    write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Load the IDX files and cut the seeded train/test split.
pub fn load_split(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let all = load_idx(&cfg.images, &cfg.labels).context("loading source images")?;
    let mut rng = SeedTree::new(cfg.train.seed).stream("data");
    let mut parts = all.split(&[cfg.train_size, cfg.test_size], &mut rng)?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, test))
}

/// Held-out source images first, then the shifted suite and the optional extra domain.
pub fn eval_domains(cfg: &ExperimentConfig, test: &LabeledDataset) -> Result<Vec<LabeledDataset>> {
    let seed = cfg.train.seed;
    let mut domains = vec![test.clone()];
    domains.extend(make_eval_suite(test, seed)?);
    if let Some(spec) = cfg.extra_shift {
        let mut extra = apply_shift(test, spec, seed)?;
        extra.name = spec.label();
        domains.push(extra);
    }
    Ok(domains)
}

pub fn evaluate_report(
    cfg: &ExperimentConfig,
    model: &l2d_core::model::TaskModel,
    test: &LabeledDataset,
) -> Result<EvalReport> {
    let rows = evaluate(model, &eval_domains(cfg, test)?)?;
    Ok(EvalReport { rows, source_rows: 1 })
}

/// Train and write the checkpoint, the metrics CSV and the resolved config.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (train_set, _) = load_split(cfg)?;
    log::info!(
        "training {} on {} images for {} epochs (seed {})",
        cfg.train.ablation,
        train_set.len(),
        cfg.train.epochs,
        cfg.train.seed
    );
    let outcome = train(&cfg.train, &train_set)?;
    let out = &cfg.out_dir;
    write(out, SNAPSHOT_FILE, cfg.render().as_bytes())?;
    write(out, METRICS_FILE, outcome.metrics.to_csv().as_bytes())?;
    write(out, CHECKPOINT_FILE, &outcome.learner.to_checkpoint()?.to_bytes())?;
    Ok(outcome)
}

/// Evaluate a saved task model on the source test split and the shifted suite.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let model = load_task_model(&ckpt).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (_, test) = load_split(cfg)?;
    let report = evaluate_report(cfg, &model, &test)?;
    for r in &report.rows {
        log::info!("{:>12}: {:.4} ({} images)", r.domain, r.accuracy, r.n);
    }
    log::info!("average over shifted domains: {:.4}", report.average_shifted());
    write(&cfg.out_dir, RESULTS_FILE, report.to_csv().as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiRow {
    pub rho: f64,
    pub analytic: f64,
    pub held_out: f64,
    pub in_sample: f64,
}

pub fn mi_table_csv(rows: &[MiRow]) -> String {
    let mut s = String::from("rho,analytic_mi,club_held_out,club_in_sample\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.rho, r.analytic, r.held_out, r.in_sample);
    }
    s
}

/// Fit CLUB on correlated Gaussian pairs for each correlation and compare with the true MI.
pub fn run_mi_bench(seed: u64, out_dir: &Path) -> Result<Vec<MiRow>> {
    let seeds = SeedTree::new(seed);
    let mut rows = Vec::new();
    for (i, &rho) in MI_BENCH_RHOS.iter().enumerate() {
        let mut rng = seeds.indexed("mi-bench", i as u64);
        let (fit, held_out) = club_oracle(MI_BENCH_PAIRS, MI_BENCH_DIM, rho, FitConfig::default(), &mut rng)?;
        let row = MiRow { rho, analytic: gaussian_mi(MI_BENCH_DIM, rho), held_out, in_sample: fit.in_sample };
        log::info!("rho {rho}: analytic {:.4}, held-out {:.4}, in-sample {:.4}", row.analytic, held_out, fit.in_sample);
        rows.push(row);
    }
    write(out_dir, MI_BENCH_FILE, mi_table_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: EvalReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("ablation");
    if let Some(first) = rows.first() {
        for d in &first.report.rows {
            let _ = write!(s, ",{}", d.domain);
        }
    }
    s.push_str(",average\n");
    for r in rows {
        s.push_str(r.ablation.name());
        for d in &r.report.rows {
            let _ = write!(s, ",{}", d.accuracy);
        }
        let _ = writeln!(s, ",{}", r.report.average_shifted());
    }
    s
}

/// Train and evaluate every variant under one budget; each variant gets its own
/// subdirectory and the comparison goes to `ablation.csv`.
pub fn run_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let (train_set, test) = load_split(cfg)?;
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut variant = cfg.clone();
        variant.train.ablation = ablation;
        variant.out_dir = cfg.out_dir.join(ablation.name());
        log::info!("ablation {ablation}");
        let outcome = train(&variant.train, &train_set)?;
        let report = evaluate_report(&variant, &outcome.learner.model, &test)?;
        write(&variant.out_dir, SNAPSHOT_FILE, variant.render().as_bytes())?;
        write(&variant.out_dir, METRICS_FILE, outcome.metrics.to_csv().as_bytes())?;
        write(&variant.out_dir, RESULTS_FILE, report.to_csv().as_bytes())?;
        log::info!("{ablation}: average {:.4}", report.average_shifted());
        rows.push(AblationRow { ablation, report });
    }
    write(&cfg.out_dir, ABLATION_FILE, ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}
