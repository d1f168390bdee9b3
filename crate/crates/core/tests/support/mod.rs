#![allow(dead_code)]


use std::path::PathBuf;

use l2d_core::data::{load_idx, LabeledDataset};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k")
}

/// The bundled 5000-image MNIST subset.
pub fn mnist() -> LabeledDataset {
    let dir = data_dir();
    load_idx(&dir.join("images-idx3-ubyte.gz"), &dir.join("labels-idx1-ubyte.gz")).expect("bundled MNIST subset")
}
