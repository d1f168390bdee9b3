//! Deterministic inputs shared by the kernel benchmarks.

use l2d_core::rng::SeedTree;
use l2d_core::Tensor;
use rand::Rng;

/// A tensor of the given shape filled with uniform values in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedTree::new(seed).stream("bench");
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `n` distinct labels drawn round-robin from `classes` classes.
pub fn cyclic_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}
