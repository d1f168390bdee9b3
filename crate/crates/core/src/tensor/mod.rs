//! Dense `f64` tensors with a tape-based reverse-mode differentiator.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod value;

pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;

use crate::error::Result;

/// Stabilizer added under every square root of a variance.
pub const VAR_EPS: f64 = 1e-5;

/// Per-sample, per-channel spatial mean and population variance of `[B, C, H, W]`.
pub fn instance_mean_var(tape: &mut Tape, f: Var) -> Result<(Var, Var)> {
    let mean = tape.spatial_mean(f)?;
    let var = tape.spatial_var(f)?;
    Ok((mean, var))
}
