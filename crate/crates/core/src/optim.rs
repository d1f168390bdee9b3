//! Optimizers over flat parameter lists.

use std::f64::consts::PI;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        SgdConfig { lr, momentum: 0.0, weight_decay: 0.0, nesterov: false }
    }
}

/// Stochastic gradient descent with heavy-ball or Nesterov momentum and L2 weight decay.
///
/// Update rule (per element): `g += wd * p; buf = m * buf + g; p -= lr * (nesterov ? g + m * buf : buf)`,
/// with the buffer initialized to the first gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, buffers: Vec::new() }
    }

    /// Apply one update at learning rate `lr`. Parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        let SgdConfig { momentum, weight_decay, nesterov, .. } = self.config;
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(self.buffers.iter_mut()) {
            let Some(g) = g else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let mut d: Vec<f64> = p.data().iter().zip(g.data()).map(|(&pv, &gv)| gv + weight_decay * pv).collect();
            if momentum != 0.0 {
                match buf {
                    Some(b) => b.iter_mut().zip(&d).for_each(|(b, &dv)| *b = momentum * *b + dv),
                    None => *buf = Some(d.clone()),
                }
                let b = buf.as_ref().expect("momentum buffer");
                if nesterov {
                    d.iter_mut().zip(b).for_each(|(dv, &bv)| *dv += momentum * bv);
                } else {
                    d.copy_from_slice(b);
                }
            }
            p.data_mut().iter_mut().zip(&d).for_each(|(pv, dv)| *pv -= lr * dv);
        }
    }
}

/// Rescale `grads` in place so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// Adam, used for fitting standalone variational heads.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let Some(g) = g else { continue };
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}
