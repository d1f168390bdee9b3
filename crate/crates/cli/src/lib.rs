//! Experiment driver: config files, data preparation and the `train`, `eval`,
//! `mi-bench` and `ablate` commands.

pub mod commands;
pub mod config;

pub use commands::{
    eval_domains, evaluate_report, load_split, run_ablate, run_eval, run_mi_bench, run_train, AblationRow, MiRow,
};
pub use config::{ConfigError, ExperimentConfig};
