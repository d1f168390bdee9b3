//! Learning-to-diversify style augmentation for single-source domain generalization.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), the
//! style-complement generator ([`style`]), the mutual-information and consistency
//! objectives ([`objectives`]), a LeNet task network ([`model`]), the alternating
//! min-max trainer ([`trainer`]) and the digit data pipeline ([`data`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod style;
pub mod tensor;
pub mod trainer;

pub use error::{L2dError, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
