//! Plain-text experiment configuration: one `key = value` pair per line, `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use l2d_core::data::{ShiftFamily, ShiftSpec};
use l2d_core::objectives::{MmdKernel, Reduction};
use l2d_core::trainer::{Ablation, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },

    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },

    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub out_dir: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    /// Optional extra target domain evaluated after the fixed suite.
    pub extra_shift: Option<ShiftSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            images: PathBuf::from("data/mnist5k/images-idx3-ubyte.gz"),
            labels: PathBuf::from("data/mnist5k/labels-idx1-ubyte.gz"),
            out_dir: PathBuf::from("out"),
            train_size: 2000,
            test_size: 1000,
            extra_shift: None,
        }
    }
}

pub const KEYS: [&str; 26] = [
    "alpha1",
    "alpha2",
    "beta",
    "temperature",
    "supcon_reduction",
    "k",
    "batch_size",
    "epochs",
    "lr_task",
    "lr_generator",
    "momentum",
    "weight_decay",
    "nesterov",
    "cosine",
    "mmd_kernel",
    "likelihood_trains_features",
    "grad_clip",
    "seed",
    "ablation",
    "images",
    "labels",
    "out",
    "train_size",
    "test_size",
    "shift_family",
    "shift_severity",
];

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse {value:?}: {e}"))
}

fn parse_reduction(value: &str) -> Result<Reduction, String> {
    match value {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        _ => Err(format!("expected sum or mean, got {value:?}")),
    }
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Sum => "sum",
        Reduction::Mean => "mean",
    }
}

/// `rbf_median`, `linear`, or `rbf:<bandwidth>`.
fn parse_kernel(value: &str) -> Result<MmdKernel, String> {
    match value {
        "rbf_median" => Ok(MmdKernel::RbfMedian),
        "linear" => Ok(MmdKernel::Linear),
        _ => match value.strip_prefix("rbf:") {
            Some(h) => Ok(MmdKernel::Rbf(parse(h)?)),
            None => Err(format!("expected rbf_median, linear or rbf:<h>, got {value:?}")),
        },
    }
}

fn kernel_name(k: MmdKernel) -> String {
    match k {
        MmdKernel::RbfMedian => "rbf_median".into(),
        MmdKernel::Linear => "linear".into(),
        MmdKernel::Rbf(h) => format!("rbf:{h}"),
    }
}

fn parse_clip(value: &str) -> Result<Option<f64>, String> {
    if value == "none" {
        Ok(None)
    } else {
        parse(value).map(Some)
    }
}

impl ExperimentConfig {
    /// Parse config text. Relative paths are resolved against `base`.
    /// Returns the config and the keys that were left at their defaults.
    pub fn parse_str(text: &str, origin: &Path, base: &Path) -> Result<(Self, Vec<&'static str>), ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = Vec::new();
        let mut family: Option<ShiftFamily> = None;
        let mut severity: Option<u8> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| ConfigError::Line { path: origin.to_path_buf(), line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected key = value, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(err(format!("unknown key {key:?}")));
            };
            if seen.contains(&known) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            seen.push(known);
            let path = |v: &str| base.join(v);
            let t = &mut cfg.train;
            match known {
                "alpha1" => t.alpha1 = parse(value).map_err(err)?,
                "alpha2" => t.alpha2 = parse(value).map_err(err)?,
                "beta" => t.beta = parse(value).map_err(err)?,
                "temperature" => t.temperature = parse(value).map_err(err)?,
                "supcon_reduction" => t.supcon_reduction = parse_reduction(value).map_err(err)?,
                "k" => t.k = parse(value).map_err(err)?,
                "batch_size" => t.batch_size = parse(value).map_err(err)?,
                "epochs" => t.epochs = parse(value).map_err(err)?,
                "lr_task" => t.lr_task = parse(value).map_err(err)?,
                "lr_generator" => t.lr_generator = parse(value).map_err(err)?,
                "momentum" => t.momentum = parse(value).map_err(err)?,
                "weight_decay" => t.weight_decay = parse(value).map_err(err)?,
                "nesterov" => t.nesterov = parse(value).map_err(err)?,
                "cosine" => t.cosine = parse(value).map_err(err)?,
                "mmd_kernel" => t.mmd_kernel = parse_kernel(value).map_err(err)?,
                "likelihood_trains_features" => t.likelihood_trains_features = parse(value).map_err(err)?,
                "grad_clip" => t.grad_clip = parse_clip(value).map_err(err)?,
                "seed" => t.seed = parse(value).map_err(err)?,
                "ablation" => t.ablation = parse::<Ablation>(value).map_err(err)?,
                "images" => cfg.images = path(value),
                "labels" => cfg.labels = path(value),
                "out" => cfg.out_dir = path(value),
                "train_size" => cfg.train_size = parse(value).map_err(err)?,
                "test_size" => cfg.test_size = parse(value).map_err(err)?,
                "shift_family" => {
                    family = if value == "none" { None } else { Some(parse::<ShiftFamily>(value).map_err(err)?) }
                }
                "shift_severity" => severity = Some(parse(value).map_err(err)?),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        let invalid = |message: String| ConfigError::Invalid { path: origin.to_path_buf(), message };
        cfg.extra_shift = match (family, severity) {
            (Some(f), s) => Some(ShiftSpec::new(f, s.unwrap_or(3)).map_err(|e| invalid(e.to_string()))?),
            (None, Some(_)) => return Err(invalid("shift_severity given without shift_family".into())),
            (None, None) => None,
        };
        cfg.validate().map_err(invalid)?;
        let defaulted = KEYS.iter().copied().filter(|k| !seen.contains(k)).collect();
        Ok((cfg, defaulted))
    }

    /// Read and parse a config file; relative paths inside it are relative to the file.
    pub fn load(path: &Path) -> Result<(Self, Vec<&'static str>), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_str(&text, path, base)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.train_size < 2 || self.test_size < 1 {
            return Err(format!(
                "train_size ({}) must be >= 2 and test_size ({}) >= 1",
                self.train_size, self.test_size
            ));
        }
        Ok(())
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        put("alpha1", t.alpha1.to_string());
        put("alpha2", t.alpha2.to_string());
        put("beta", t.beta.to_string());
        put("temperature", t.temperature.to_string());
        put("supcon_reduction", reduction_name(t.supcon_reduction).into());
        put("k", t.k.to_string());
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("lr_task", t.lr_task.to_string());
        put("lr_generator", t.lr_generator.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("nesterov", t.nesterov.to_string());
        put("cosine", t.cosine.to_string());
        put("mmd_kernel", kernel_name(t.mmd_kernel));
        put("likelihood_trains_features", t.likelihood_trains_features.to_string());
        put("grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        put("seed", t.seed.to_string());
        put("ablation", t.ablation.to_string());
        put("images", self.images.display().to_string());
        put("labels", self.labels.display().to_string());
        put("out", self.out_dir.display().to_string());
        put("train_size", self.train_size.to_string());
        put("test_size", self.test_size.to_string());
        match self.extra_shift {
            Some(spec) => {
                put("shift_family", spec.family.to_string());
                put("shift_severity", spec.severity().to_string());
            }
            None => put("shift_family", "none".into()),
        }
        s
    }
}
