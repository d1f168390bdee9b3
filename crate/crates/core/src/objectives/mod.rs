//! Scalar training objectives over latent batches.
//!
//! All functions record onto a [`Tape`] so the same code path serves both the
//! generator step (gradients into the generated batch) and the task step
//! (gradients into the feature extractor and the variational head).

pub mod gaussian;
mod head;

use std::f64::consts::PI;

pub use gaussian::{club_oracle, fit_club, ClubFit, FitConfig, GaussianPairs};
pub use head::{GaussianConditional, HeadVars, IdentityConditional, VariationalGaussianHead, LOG_VAR_LIMIT};

use crate::error::{L2dError, Result};
use crate::tensor::{Tape, Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A loss together with how many anchors / classes actually contributed to it.
/// `contributing == 0` means the loss is a placeholder zero.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub value: Var,
    pub contributing: usize,
}

fn rows_cols(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match tape.shape(v) {
        &[n, d] => Ok((n, d)),
        s => Err(L2dError::Shape { op, detail: format!("expected [N, D], got {s:?}") }),
    }
}

fn paired(tape: &Tape, z: Var, z_plus: Var, op: &'static str) -> Result<(usize, usize)> {
    let dims = rows_cols(tape, z, op)?;
    if rows_cols(tape, z_plus, op)? != dims {
        return Err(L2dError::Shape { op, detail: format!("{:?} vs {:?}", tape.shape(z), tape.shape(z_plus)) });
    }
    Ok(dims)
}

/// Broadcast a `[D]` column statistic over `n` rows.
fn rows_of(tape: &mut Tape, v: Var, n: usize) -> Result<Var> {
    let d = tape.shape(v)[0];
    let r = tape.reshape(v, &[1, d])?;
    tape.broadcast_to(r, &[n, d])
}

/// Sampled CLUB estimate
/// `1/N sum_i [log q(z+_i|z_i) - 1/N sum_j log q(z+_j|z_i)]` for a diagonal Gaussian `q`
/// given by per-row `mean` and `logvar`.
///
/// The inner average over `j` is evaluated exactly through the first two moments
/// of `z+`, so the cost is `O(N D)` rather than `O(N^2 D)`.
pub fn club_from_moments(tape: &mut Tape, mean: Var, logvar: Var, z_plus: Var) -> Result<Var> {
    let (n, _) = paired(tape, mean, z_plus, "club_estimate")?;
    paired(tape, logvar, z_plus, "club_estimate")?;
    if n < 2 {
        return Err(L2dError::InvalidArgument(format!("CLUB needs at least 2 pairs, got {n}")));
    }
    let neg_lv = tape.neg(logvar);
    let inv_var = tape.exp(neg_lv);
    let half_prec = tape.scale(inv_var, 0.5);

    let diff = tape.sub(z_plus, mean)?;
    let positive_sq = tape.square(diff);

    let m1 = tape.mean_axes(z_plus, &[0])?;
    let zp_sq = tape.square(z_plus);
    let m2 = tape.mean_axes(zp_sq, &[0])?;
    let m1 = rows_of(tape, m1, n)?;
    let m2 = rows_of(tape, m2, n)?;
    // mean_j (z+_j - mean_i)^2 = E[z+^2] - 2 mean_i E[z+] + mean_i^2
    let cross = tape.mul(mean, m1)?;
    let cross = tape.scale(cross, -2.0);
    let mean_sq = tape.square(mean);
    let negative_sq = tape.add(m2, cross)?;
    let negative_sq = tape.add(negative_sq, mean_sq)?;

    let gap = tape.sub(negative_sq, positive_sq)?;
    let weighted = tape.mul(gap, half_prec)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// CLUB estimate of `I(z; z+)` under the conditional `q`.
pub fn club_estimate(tape: &mut Tape, z: Var, z_plus: Var, q: &impl GaussianConditional) -> Result<Var> {
    paired(tape, z, z_plus, "club_estimate")?;
    let (mean, logvar) = q.mean_logvar(tape, z)?;
    club_from_moments(tape, mean, logvar, z_plus)
}

/// `log q(z+_i | z_i)` per row, as an `[N]` vector.
pub fn gaussian_log_density(tape: &mut Tape, mean: Var, logvar: Var, z_plus: Var) -> Result<Var> {
    let (_, d) = paired(tape, mean, z_plus, "gaussian_log_density")?;
    let diff = tape.sub(z_plus, mean)?;
    let sq = tape.square(diff);
    let neg_lv = tape.neg(logvar);
    let inv_var = tape.exp(neg_lv);
    let maha = tape.mul(sq, inv_var)?;
    let inner = tape.add(maha, logvar)?;
    let per_row = tape.sum_axes(inner, &[1])?;
    let scaled = tape.scale(per_row, -0.5);
    Ok(tape.add_scalar(scaled, -(d as f64) * HALF_LN_2PI))
}

/// Negative mean conditional log-likelihood `-1/N sum_i log q(z+_i | z_i)`.
pub fn likelihood_loss(tape: &mut Tape, z: Var, z_plus: Var, q: &impl GaussianConditional) -> Result<Var> {
    paired(tape, z, z_plus, "likelihood_loss")?;
    let (mean, logvar) = q.mean_logvar(tape, z)?;
    let ll = gaussian_log_density(tape, mean, logvar, z_plus)?;
    let m = tape.mean(ll);
    Ok(tape.neg(m))
}

/// How per-anchor contrastive terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Divide the sum by the number of contributing anchors.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub reduction: Reduction,
}

impl ContrastiveConfig {
    /// Summed over anchors.
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(L2dError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        Ok(ContrastiveConfig { temperature, reduction: Reduction::Sum })
    }

    pub fn with_reduction(self, reduction: Reduction) -> Self {
        ContrastiveConfig { reduction, ..self }
    }
}

/// Large negative logit that removes the anchor itself from its softmax denominator.
const SELF_MASK: f64 = -1e30;

/// Supervised contrastive loss over unit-norm `embeddings` `[N, D]`:
/// `-sum_i 1/|P(i)| sum_{p in P(i)} log( exp(e_i.e_p/t) / sum_{a != i} exp(e_i.e_a/t) )`.
///
/// Anchors without positives contribute nothing.
pub fn supcon_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], cfg: &ContrastiveConfig) -> Result<MaskedLoss> {
    let (n, _) = rows_cols(tape, embeddings, "supcon_loss")?;
    if labels.len() != n {
        return Err(L2dError::shape("supcon_loss", format!("{} labels for {n} embeddings", labels.len())));
    }
    if n < 2 {
        return Err(L2dError::InvalidArgument(format!("supervised contrastive loss needs N >= 2, got {n}")));
    }
    let mut weights = vec![0.0; n * n];
    let mut contributing = 0;
    for i in 0..n {
        let positives = (0..n).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        contributing += 1;
        for p in (0..n).filter(|&p| p != i && labels[p] == labels[i]) {
            weights[i * n + p] = 1.0 / positives as f64;
        }
    }
    if contributing == 0 {
        log::warn!("supervised contrastive loss: no anchor has a positive; returning 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(MaskedLoss { value: zero, contributing });
    }
    let et = tape.transpose(embeddings)?;
    let sim = tape.matmul(embeddings, et)?;
    let logits = tape.scale(sim, 1.0 / cfg.temperature);
    let mask = tape.constant(Tensor::from_fn(vec![n, n], |k| if k / n == k % n { SELF_MASK } else { 0.0 }));
    let masked = tape.add(logits, mask)?;
    let log_prob = tape.log_softmax(masked)?;
    let w = tape.constant(Tensor::new(vec![n, n], weights)?);
    let picked = tape.mul(log_prob, w)?;
    let total = tape.sum(picked);
    let scale = match cfg.reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / contributing as f64,
    };
    Ok(MaskedLoss { value: tape.scale(total, scale), contributing })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MmdKernel {
    /// `k(a, b) = exp(-|a - b|^2 / h)` with `h` the median pairwise squared distance of the batch.
    RbfMedian,
    /// Gaussian kernel with a fixed `h`.
    Rbf(f64),
    /// `k(a, b) = a . b`: plain distance between class means.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdConfig {
    pub kernel: MmdKernel,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig { kernel: MmdKernel::RbfMedian }
    }
}

/// Median of the pairwise squared distances among all rows of `parts`;
/// falls back to 1 when the median is not strictly positive.
pub fn median_bandwidth(parts: &[&Tensor]) -> f64 {
    let rows: Vec<&[f64]> = parts
        .iter()
        .flat_map(|t| {
            let d = t.shape().get(1).copied().unwrap_or(1).max(1);
            t.data().chunks(d)
        })
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

fn mean_kernel(tape: &mut Tape, a: Var, b: Var, bandwidth: f64) -> Result<Var> {
    let d2 = tape.pairwise_sq_dists(a, b)?;
    let scaled = tape.scale(d2, -1.0 / bandwidth);
    let k = tape.exp(scaled);
    Ok(tape.mean(k))
}

/// Class-conditional MMD between source latents `z` (labels `y`) and generated
/// latents `z_plus` (labels `y_plus`), averaged over classes present in both.
pub fn class_conditional_mmd(
    tape: &mut Tape,
    z: Var,
    y: &[usize],
    z_plus: Var,
    y_plus: &[usize],
    cfg: &MmdConfig,
) -> Result<MaskedLoss> {
    let (n, d) = rows_cols(tape, z, "class_conditional_mmd")?;
    let (m, d2) = rows_cols(tape, z_plus, "class_conditional_mmd")?;
    if d != d2 || y.len() != n || y_plus.len() != m {
        return Err(L2dError::shape(
            "class_conditional_mmd",
            format!("z {n}x{d} ({} labels), z+ {m}x{d2} ({} labels)", y.len(), y_plus.len()),
        ));
    }
    let bandwidth = match cfg.kernel {
        MmdKernel::RbfMedian => median_bandwidth(&[tape.value(z), tape.value(z_plus)]),
        MmdKernel::Rbf(h) if h > 0.0 => h,
        MmdKernel::Rbf(h) => return Err(L2dError::InvalidArgument(format!("RBF bandwidth must be positive, got {h}"))),
        MmdKernel::Linear => 1.0,
    };
    let classes = {
        let mut c: Vec<usize> = y.iter().copied().filter(|c| y_plus.contains(c)).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.is_empty() {
        log::warn!("class-conditional MMD: no class present in both batches; returning 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(MaskedLoss { value: zero, contributing: 0 });
    }
    let mut terms = Vec::with_capacity(classes.len());
    for &c in &classes {
        let src_rows: Vec<usize> = (0..n).filter(|&i| y[i] == c).collect();
        let gen_rows: Vec<usize> = (0..m).filter(|&j| y_plus[j] == c).collect();
        let s = tape.select_rows(z, &src_rows)?;
        let t = tape.select_rows(z_plus, &gen_rows)?;
        let term = match cfg.kernel {
            MmdKernel::Linear => {
                let ms = tape.mean_axes(s, &[0])?;
                let mt = tape.mean_axes(t, &[0])?;
                let diff = tape.sub(ms, mt)?;
                let sq = tape.square(diff);
                tape.sum(sq)
            }
            MmdKernel::RbfMedian | MmdKernel::Rbf(_) => {
                let kss = mean_kernel(tape, s, s, bandwidth)?;
                let kst = mean_kernel(tape, s, t, bandwidth)?;
                let ktt = mean_kernel(tape, t, t, bandwidth)?;
                let kst2 = tape.scale(kst, -2.0);
                let a = tape.add(kss, kst2)?;
                tape.add(a, ktt)?
            }
        };
        terms.push(term);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let value = tape.scale(total, 1.0 / classes.len() as f64);
    Ok(MaskedLoss { value, contributing: classes.len() })
}

/// Mean cross-entropy of `logits` `[N, C]` against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_prob = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(log_prob, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Task loss over a source batch and its generated counterpart, which shares the labels:
/// `-1/(2N) [sum_i log p(y_i | x_i) + sum_j log p(y_j | x+_j)]`.
pub fn cross_entropy_task(tape: &mut Tape, logits: Var, logits_plus: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        return Err(L2dError::InvalidArgument("empty label batch".into()));
    }
    paired(tape, logits, logits_plus, "cross_entropy_task")?;
    let lp = tape.log_softmax(logits)?;
    let lpp = tape.log_softmax(logits_plus)?;
    let a = tape.pick_per_row(lp, labels)?;
    let b = tape.pick_per_row(lpp, labels)?;
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    let total = tape.add(sa, sb)?;
    Ok(tape.scale(total, -1.0 / (2 * n) as f64))
}

/// InfoNCE lower bound with critic `f(a, b) = a.b / scale`:
/// `log N + 1/N sum_i [f(z_i, z+_i) - log sum_j exp f(z_i, z+_j)]`. Never exceeds `log N`.
pub fn infonce_estimate(tape: &mut Tape, z: Var, z_plus: Var, scale: f64) -> Result<Var> {
    let (n, _) = paired(tape, z, z_plus, "infonce_estimate")?;
    if n < 2 {
        return Err(L2dError::InvalidArgument(format!("InfoNCE needs at least 2 pairs, got {n}")));
    }
    let zt = tape.transpose(z_plus)?;
    let scores = tape.matmul(z, zt)?;
    let scores = tape.scale(scores, 1.0 / scale);
    let log_prob = tape.log_softmax(scores)?;
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick_per_row(log_prob, &diag)?;
    let m = tape.mean(picked);
    Ok(tape.add_scalar(m, (n as f64).ln()))
}

/// Analytic mutual information of `D` independent bivariate normal pairs with correlation `rho`.
pub fn gaussian_mi(dim: usize, rho: f64) -> f64 {
    -(dim as f64) / 2.0 * (1.0 - rho * rho).ln()
}

#[doc(hidden)]
pub fn ln_2pi_half() -> f64 {
    0.5 * (2.0 * PI).ln()
}
