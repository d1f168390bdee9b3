use crate::error::Result;
use crate::model::{uniform_init, Parameterized};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor, Var};

/// Bound on the predicted log-variance, in both directions.
pub const LOG_VAR_LIMIT: f64 = 10.0;

/// Diagonal Gaussian `q(z+ | z)` whose moments come from a two-layer perceptron.
///
/// `h = tanh(W1 z + b1)` with width `2 * dim`; mean and log-variance are separate
/// linear read-outs of `h`, the latter clamped to `[-10, 10]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGaussianHead {
    dim: usize,
    w1: Tensor,
    b1: Tensor,
    w_mean: Tensor,
    b_mean: Tensor,
    w_logvar: Tensor,
    b_logvar: Tensor,
}

impl VariationalGaussianHead {
    pub fn new(dim: usize, rng: &mut StreamRng) -> Self {
        let hidden = 2 * dim;
        VariationalGaussianHead {
            dim,
            w1: uniform_init(&[hidden, dim], dim, rng),
            b1: uniform_init(&[hidden], dim, rng),
            w_mean: uniform_init(&[dim, hidden], hidden, rng),
            b_mean: uniform_init(&[dim], hidden, rng),
            w_logvar: uniform_init(&[dim, hidden], hidden, rng),
            b_logvar: uniform_init(&[dim], hidden, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let v = self.bind_all(tape, trainable);
        HeadVars { w1: v[0], b1: v[1], w_mean: v[2], b_mean: v[3], w_logvar: v[4], b_logvar: v[5] }
    }
}

impl Parameterized for VariationalGaussianHead {
    fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("fc.weight", &self.w1),
            ("fc.bias", &self.b1),
            ("mean.weight", &self.w_mean),
            ("mean.bias", &self.b_mean),
            ("logvar.weight", &self.w_logvar),
            ("logvar.bias", &self.b_logvar),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w_mean, &mut self.b_mean, &mut self.w_logvar, &mut self.b_logvar]
    }
}

/// Source of the per-row mean and log-variance of `q(z+ | z)`.
pub trait GaussianConditional {
    fn mean_logvar(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)>;
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w_mean: Var,
    pub b_mean: Var,
    pub w_logvar: Var,
    pub b_logvar: Var,
}

impl HeadVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w_mean, self.b_mean, self.w_logvar, self.b_logvar]
    }
}

impl GaussianConditional for HeadVars {
    fn mean_logvar(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let h = tape.linear(z, self.w1, self.b1)?;
        let h = tape.tanh(h);
        let mean = tape.linear(h, self.w_mean, self.b_mean)?;
        let raw = tape.linear(h, self.w_logvar, self.b_logvar)?;
        let logvar = tape.clamp(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        Ok((mean, logvar))
    }
}

/// `q(z+ | z) = N(z, exp(log_var) I)`: a parameter-free reference conditional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityConditional {
    pub log_var: f64,
}

impl GaussianConditional for IdentityConditional {
    fn mean_logvar(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(z).to_vec();
        let logvar = tape.constant(Tensor::full(shape, self.log_var));
        Ok((z, logvar))
    }
}
