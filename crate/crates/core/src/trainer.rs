//! Alternating min-max training: per mini-batch, one generator step on the style
//! shifts followed by one task step on the feature extractor, classifier and
//! variational head.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{L2dError, Result};
use crate::model::{accuracy, argmax, Parameterized, TaskModel, EMBED_DIM};
use crate::objectives::{
    class_conditional_mmd, club_estimate, cross_entropy, cross_entropy_task, infonce_estimate, likelihood_loss,
    supcon_loss, ContrastiveConfig, MmdConfig, MmdKernel, Reduction, VariationalGaussianHead,
};
use crate::optim::{clip_grad_norm, cosine_lr, Sgd, SgdConfig};
use crate::rng::{SeedTree, StreamRng};
use crate::style::{MixWeights, StyleComplementModule, StyleConfig, MIX_GUARD};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Training variants: the full method and four single-component removals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// No generator at all: cross-entropy on the source batch only (ERM).
    NoStyle,
    /// Generator without the learnable style layer; nothing to update in the generator step.
    NoMod,
    /// Generator minimizes only the consistency term.
    NoMinMi,
    /// Task step without the supervised contrastive term.
    NoMaxMi,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::NoStyle, Ablation::NoMod, Ablation::NoMinMi, Ablation::NoMaxMi];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoStyle => "no_style",
            Ablation::NoMod => "no_mod",
            Ablation::NoMinMi => "no_min_mi",
            Ablation::NoMaxMi => "no_max_mi",
        }
    }

    pub fn uses_generator(self) -> bool {
        self != Ablation::NoStyle
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = L2dError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| L2dError::InvalidArgument(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the supervised contrastive term.
    pub alpha1: f64,
    /// Weight of the likelihood term.
    pub alpha2: f64,
    /// Weight of the consistency term in the generator objective.
    pub beta: f64,
    pub temperature: f64,
    /// Combination of the per-anchor contrastive terms.
    pub supcon_reduction: Reduction,
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_task: f64,
    pub lr_generator: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub cosine: bool,
    pub mmd_kernel: MmdKernel,
    /// Let the likelihood term's gradient reach the feature extractor; otherwise it only fits `q`.
    pub likelihood_trains_features: bool,
    /// Cap on the joint gradient norm of each step; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 1.0,
            temperature: 0.1,
            supcon_reduction: Reduction::Mean,
            k: 6,
            batch_size: 32,
            epochs: 5,
            lr_task: 1e-2,
            lr_generator: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: false,
            cosine: false,
            mmd_kernel: MmdKernel::RbfMedian,
            likelihood_trains_features: false,
            grad_clip: Some(5.0),
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(L2dError::InvalidArgument(m));
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        for (name, v) in [("lr_task", self.lr_task), ("lr_generator", self.lr_generator)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let MmdKernel::Rbf(h) = self.mmd_kernel {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("MMD bandwidth must be positive, got {h}"));
            }
        }
        Ok(())
    }

    pub fn style_config(&self) -> StyleConfig {
        StyleConfig { modulate: self.ablation != Ablation::NoMod, mix_guard: MIX_GUARD, ..StyleConfig::with_k(self.k) }
    }

    fn task_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr_task,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }
}

/// Values recorded by one generator step (before its update).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorStats {
    pub loss: f64,
    pub club: f64,
    pub consistency: f64,
    pub infonce: f64,
}

/// Values recorded by one task step (before its update).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskStats {
    pub loss: f64,
    pub cross_entropy: f64,
    pub supcon: Option<f64>,
    pub likelihood: Option<f64>,
    pub correct: usize,
    pub seen: usize,
}

/// Everything trained or drawn during a run.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: TaskModel,
    pub head: VariationalGaussianHead,
    pub generator: StyleComplementModule,
    task_opt: Sgd,
    gen_opt: Sgd,
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(L2dError::NonFinite { what: what.to_owned(), value: v })
    }
}

/// Gradients of `vars`, clipped to `clip` in joint norm when set.
fn collect_grads(grads: &mut Gradients, vars: &[Var], clip: Option<f64>) -> Vec<Option<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
    if let Some(max) = clip {
        clip_grad_norm(&mut out, max);
    }
    out
}

impl Learner {
    /// Fresh parameters: task model and head from `init`, generator kernels from `kernels`.
    pub fn new(cfg: &TrainConfig, num_classes: usize, init: &mut StreamRng, kernels: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        let model = TaskModel::new(num_classes, init);
        let head = VariationalGaussianHead::new(EMBED_DIM, init);
        let generator = StyleComplementModule::new(cfg.style_config(), kernels)?;
        Ok(Learner {
            model,
            head,
            generator,
            task_opt: Sgd::new(cfg.task_sgd()),
            gen_opt: Sgd::new(SgdConfig::plain(cfg.lr_generator)),
        })
    }

    /// Minimize `I(z; z+) + beta * L_const` over the style shifts with the task
    /// model and head frozen. Kernels must have been redrawn beforehand.
    pub fn generator_step(
        &mut self,
        cfg: &TrainConfig,
        x: &Tensor,
        y: &[usize],
        weights: &MixWeights,
    ) -> Result<GeneratorStats> {
        let trainable = cfg.ablation != Ablation::NoMod;
        let mut tape = Tape::new();
        let f = self.model.bind(&mut tape, false);
        let q = self.head.bind(&mut tape, false);
        let g = self.generator.bind(&mut tape, trainable);
        let xv = tape.constant(x.clone());
        let x_plus = g.generate(&mut tape, xv, weights)?;
        let z = f.embed(&mut tape, xv)?;
        let z_plus = f.embed(&mut tape, x_plus)?;

        let club = club_estimate(&mut tape, z, z_plus, &q)?;
        let consistency = class_conditional_mmd(&mut tape, z, y, z_plus, y, &MmdConfig { kernel: cfg.mmd_kernel })?;
        let z_det = tape.detach(z);
        let zp_det = tape.detach(z_plus);
        let nce = infonce_estimate(&mut tape, z_det, zp_det, (EMBED_DIM as f64).sqrt())?;
        let weighted = tape.scale(consistency.value, cfg.beta);
        let loss = if cfg.ablation == Ablation::NoMinMi { weighted } else { tape.add(club, weighted)? };

        let stats = GeneratorStats {
            loss: finite("generator loss", tape.value(loss).item()?)?,
            club: finite("CLUB estimate", tape.value(club).item()?)?,
            consistency: finite("consistency loss", tape.value(consistency.value).item()?)?,
            infonce: tape.value(nce).item()?,
        };
        if trainable {
            let grads = collect_grads(&mut tape.backward(loss)?, &g.params(), cfg.grad_clip);
            let grads: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            let lr = self.gen_opt.config.lr;
            self.gen_opt.step(&mut self.generator.params_mut(), &grads, lr);
        }
        Ok(stats)
    }

    /// Minimize `L_task + alpha1 * L_supcon + alpha2 * L_likeli` over the task model
    /// and head, with `x_plus` fixed. Without `x_plus` the loss is plain cross-entropy on `x`.
    pub fn task_step(
        &mut self,
        cfg: &TrainConfig,
        x: &Tensor,
        y: &[usize],
        x_plus: Option<&Tensor>,
        lr: f64,
    ) -> Result<TaskStats> {
        let mut tape = Tape::new();
        let f = self.model.bind(&mut tape, true);
        let q = self.head.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let z = f.embed(&mut tape, xv)?;
        let logits = f.classify(&mut tape, z)?;
        let correct =
            tape.value(logits).data().chunks(self.model.num_classes).zip(y).filter(|(r, &l)| argmax(r) == l).count();

        let (loss, ce, supcon, likelihood) = match x_plus {
            None => {
                let ce = cross_entropy(&mut tape, logits, y)?;
                (ce, ce, None, None)
            }
            Some(xp) => {
                let xpv = tape.constant(xp.clone());
                let z_plus = f.embed(&mut tape, xpv)?;
                let logits_plus = f.classify(&mut tape, z_plus)?;
                let ce = cross_entropy_task(&mut tape, logits, logits_plus, y)?;
                let mut loss = ce;
                let supcon = if cfg.ablation == Ablation::NoMaxMi {
                    None
                } else {
                    let both = tape.concat_rows(&[z, z_plus])?;
                    let emb = tape.l2_normalize_rows(both)?;
                    let labels: Vec<usize> = y.iter().chain(y).copied().collect();
                    let s = supcon_loss(
                        &mut tape,
                        emb,
                        &labels,
                        &ContrastiveConfig::new(cfg.temperature)?.with_reduction(cfg.supcon_reduction),
                    )?;
                    let term = tape.scale(s.value, cfg.alpha1);
                    loss = tape.add(loss, term)?;
                    Some(s.value)
                };
                let ll = if cfg.likelihood_trains_features {
                    likelihood_loss(&mut tape, z, z_plus, &q)?
                } else {
                    let (zd, zpd) = (tape.detach(z), tape.detach(z_plus));
                    likelihood_loss(&mut tape, zd, zpd, &q)?
                };
                let term = tape.scale(ll, cfg.alpha2);
                loss = tape.add(loss, term)?;
                (loss, ce, supcon, Some(ll))
            }
        };
        let stats = TaskStats {
            loss: finite("task loss", tape.value(loss).item()?)?,
            cross_entropy: tape.value(ce).item()?,
            supcon: supcon.map(|v| tape.value(v).item()).transpose()?,
            likelihood: likelihood.map(|v| tape.value(v).item()).transpose()?,
            correct,
            seen: y.len(),
        };
        // The task network and the head are clipped as separate groups.
        let mut grads = tape.backward(loss)?;
        let mut owned = collect_grads(&mut grads, &f.vars(), cfg.grad_clip);
        owned.extend(collect_grads(&mut grads, &q.vars(), cfg.grad_clip));
        let grads: Vec<Option<&Tensor>> = owned.iter().map(Option::as_ref).collect();
        let mut params = self.model.params_mut();
        params.extend(self.head.params_mut());
        self.task_opt.step(&mut params, &grads, lr);
        Ok(stats)
    }

    /// Task model, head and style shifts under the prefixes `task`, `q` and `style`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        self.model.write_to("task", &mut ckpt)?;
        self.head.write_to("q", &mut ckpt)?;
        self.generator.write_to("style", &mut ckpt)?;
        Ok(ckpt)
    }
}

/// Rebuild the task model stored under `task.` in a checkpoint.
pub fn load_task_model(ckpt: &Checkpoint) -> Result<TaskModel> {
    let classes = ckpt.require("task.head.bias")?.len();
    let mut model = TaskModel::new(classes, &mut SeedTree::new(0).stream("init"));
    model.read_from("task", ckpt)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Long-format log: one row per (epoch, split, metric).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "epoch,split,metric,value";

impl RunMetrics {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow { epoch, split: split.to_owned(), metric: metric.to_owned(), value });
    }

    /// Values of `metric` on `split`, in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split && r.metric == metric).map(|r| r.value).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.value.is_finite())
    }

    /// CSV text; floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
        }
        out
    }
}

#[derive(Default)]
struct EpochAccumulator {
    sums: Vec<(&'static str, f64, usize)>,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn add(&mut self, name: &'static str, v: f64) {
        match self.sums.iter_mut().find(|(n, _, _)| *n == name) {
            Some((_, s, c)) => {
                *s += v;
                *c += 1;
            }
            None => self.sums.push((name, v, 1)),
        }
    }

    fn flush(self, epoch: usize, metrics: &mut RunMetrics) {
        for (name, sum, count) in self.sums {
            metrics.push(epoch, "train", name, sum / count as f64);
        }
        metrics.push(epoch, "train", "accuracy", self.correct as f64 / self.seen.max(1) as f64);
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub metrics: RunMetrics,
}

/// Run the full schedule on `dataset`. All randomness derives from `cfg.seed`
/// through the `init`, `data`, `generator` and `mix-weights` streams.
pub fn train(cfg: &TrainConfig, dataset: &LabeledDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(L2dError::InvalidArgument(format!(
            "dataset {} has {} images; need at least 2",
            dataset.name,
            dataset.len()
        )));
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut init = seeds.stream("init");
    let mut data_rng = seeds.stream("data");
    let mut gen_rng = seeds.stream("generator");
    let mut mix_rng = seeds.stream("mix-weights");
    let mut learner = Learner::new(cfg, dataset.num_classes(), &mut init, &mut gen_rng)?;

    let batch = cfg.batch_size.min(dataset.len());
    let batches_per_epoch = dataset.len() / batch;
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut metrics = RunMetrics::default();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut data_rng);
        let mut acc = EpochAccumulator::default();
        for idx in order.chunks_exact(batch) {
            let (x, y) = dataset.batch(idx)?;
            let x_plus = if cfg.ablation.uses_generator() {
                learner.generator.reinit(&mut gen_rng);
                let weights = learner.generator.draw_weights(&mut mix_rng)?;
                let g = learner.generator_step(cfg, &x, &y, &weights)?;
                acc.add("generator_loss", g.loss);
                acc.add("club", g.club);
                acc.add("consistency", g.consistency);
                acc.add("infonce", g.infonce);
                Some(learner.generator.generate(&x, &weights)?)
            } else {
                None
            };
            let lr = if cfg.cosine { cosine_lr(cfg.lr_task, step, total_steps) } else { cfg.lr_task };
            let t = learner.task_step(cfg, &x, &y, x_plus.as_ref(), lr)?;
            acc.add("task_loss", t.loss);
            acc.add("cross_entropy", t.cross_entropy);
            if let Some(v) = t.supcon {
                acc.add("supcon", v);
            }
            if let Some(v) = t.likelihood {
                acc.add("likelihood", v);
            }
            acc.correct += t.correct;
            acc.seen += t.seen;
            step += 1;
        }
        acc.flush(epoch, &mut metrics);
        log::info!(
            "epoch {epoch}/{}: {}",
            cfg.epochs,
            metrics
                .rows
                .iter()
                .filter(|r| r.epoch == epoch)
                .map(|r| format!("{}={:.4}", r.metric, r.value))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    Ok(TrainOutcome { learner, metrics })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainAccuracy {
    pub domain: String,
    pub n: usize,
    pub accuracy: f64,
}

/// Accuracy per domain; the first `source_rows` entries are in-domain and do not
/// count towards the average.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<DomainAccuracy>,
    pub source_rows: usize,
}

pub const RESULTS_HEADER: &str = "domain,n,accuracy";

impl EvalReport {
    /// Unweighted mean over the shifted domains.
    pub fn average_shifted(&self) -> f64 {
        let shifted = &self.rows[self.source_rows.min(self.rows.len())..];
        if shifted.is_empty() {
            return f64::NAN;
        }
        shifted.iter().map(|r| r.accuracy).sum::<f64>() / shifted.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULTS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.domain, r.n, r.accuracy);
        }
        let n: usize = self.rows[self.source_rows.min(self.rows.len())..].iter().map(|r| r.n).sum();
        let _ = writeln!(out, "average,{n},{}", self.average_shifted());
        out
    }
}

/// Accuracy of `model` on each domain, evaluated concurrently.
pub fn evaluate(model: &TaskModel, domains: &[LabeledDataset]) -> Result<Vec<DomainAccuracy>> {
    domains
        .par_iter()
        .map(|d| {
            if d.num_classes() != model.num_classes {
                return Err(L2dError::shape(
                    "evaluate",
                    format!("domain {} has {} classes, model {}", d.name, d.num_classes(), model.num_classes),
                ));
            }
            let preds = model.predict(d.images(), 256)?;
            Ok(DomainAccuracy { domain: d.name.clone(), n: d.len(), accuracy: accuracy(&preds, d.labels()) })
        })
        .collect()
}
