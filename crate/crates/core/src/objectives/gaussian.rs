//! Correlated Gaussian pairs with known mutual information, used to check that a
//! fitted CLUB estimate tracks the true value.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{L2dError, Result};
use crate::model::Parameterized;
use crate::optim::Adam;
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor};

use super::{club_estimate, gaussian_mi, likelihood_loss, VariationalGaussianHead};

/// `N` pairs of `D`-dimensional vectors; each coordinate pair is bivariate standard
/// normal with correlation `rho`, coordinates independent of each other.
#[derive(Clone, Debug)]
pub struct GaussianPairs {
    pub z: Tensor,
    pub z_plus: Tensor,
    pub rho: f64,
}

impl GaussianPairs {
    pub fn sample(n: usize, dim: usize, rho: f64, rng: &mut StreamRng) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(L2dError::InvalidArgument(format!("correlation must lie in (-1, 1), got {rho}")));
        }
        let noise_scale = (1.0 - rho * rho).sqrt();
        let mut z = Vec::with_capacity(n * dim);
        let mut zp = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            let a: f64 = StandardNormal.sample(rng);
            let e: f64 = StandardNormal.sample(rng);
            z.push(a);
            zp.push(rho * a + noise_scale * e);
        }
        Ok(GaussianPairs { z: Tensor::new(vec![n, dim], z)?, z_plus: Tensor::new(vec![n, dim], zp)?, rho })
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn analytic_mi(&self) -> f64 {
        gaussian_mi(self.dim(), self.rho)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    /// Full-batch Adam steps on the likelihood loss.
    pub steps: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { steps: 800, lr: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct ClubFit {
    pub head: VariationalGaussianHead,
    /// CLUB estimate on the fitting pairs themselves (biased upward by overfitting).
    pub in_sample: f64,
    /// Likelihood loss before each optimizer step.
    pub likelihood_trace: Vec<f64>,
}

/// Fit a fresh variational head to `pairs` by full-batch maximum likelihood.
pub fn fit_club(pairs: &GaussianPairs, cfg: FitConfig, rng: &mut StreamRng) -> Result<ClubFit> {
    let mut head = VariationalGaussianHead::new(pairs.dim(), rng);
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let q = head.bind(&mut tape, true);
        let z = tape.constant(pairs.z.clone());
        let zp = tape.constant(pairs.z_plus.clone());
        let loss = likelihood_loss(&mut tape, z, zp, &q)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(L2dError::NonFinite { what: "likelihood while fitting q".into(), value });
        }
        trace.push(value);
        let mut grads = tape.backward(loss)?;
        let owned: Vec<Option<Tensor>> = q.vars().into_iter().map(|v| grads.take(v)).collect();
        let refs: Vec<Option<&Tensor>> = owned.iter().map(Option::as_ref).collect();
        opt.step(&mut head.params_mut(), &refs);
    }
    let in_sample = club_on(&head, pairs)?;
    Ok(ClubFit { head, in_sample, likelihood_trace: trace })
}

impl ClubFit {
    /// CLUB estimate on `pairs` under the fitted head.
    pub fn estimate_on(&self, pairs: &GaussianPairs) -> Result<f64> {
        club_on(&self.head, pairs)
    }
}

fn club_on(head: &VariationalGaussianHead, pairs: &GaussianPairs) -> Result<f64> {
    let mut tape = Tape::new();
    let q = head.bind(&mut tape, false);
    let z = tape.constant(pairs.z.clone());
    let zp = tape.constant(pairs.z_plus.clone());
    let est = club_estimate(&mut tape, z, zp, &q)?;
    tape.value(est).item()
}

/// Fit `q` on one draw of `n` pairs and evaluate CLUB on an independent draw of the
/// same size. Returns the fit and the held-out estimate.
pub fn club_oracle(n: usize, dim: usize, rho: f64, cfg: FitConfig, rng: &mut StreamRng) -> Result<(ClubFit, f64)> {
    let fit_pairs = GaussianPairs::sample(n, dim, rho, rng)?;
    let eval_pairs = GaussianPairs::sample(n, dim, rho, rng)?;
    let fit = fit_club(&fit_pairs, cfg, rng)?;
    let estimate = fit.estimate_on(&eval_pairs)?;
    Ok((fit, estimate))
}
