use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::idx::{self, RawImages};
use crate::error::{L2dError, Result};
use crate::model::{IMAGE_CHANNELS, IMAGE_SIDE};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Images `[N, 3, 32, 32]` in `[-1, 1]` with labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let &[n, c, h, w] = images.shape() else {
            return Err(L2dError::shape("dataset", format!("images must be [N, C, H, W], got {:?}", images.shape())));
        };
        if (c, h, w) != (IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE) {
            return Err(L2dError::shape("dataset", format!("image geometry {c}x{h}x{w}, expected 3x32x32")));
        }
        if labels.len() != n {
            return Err(L2dError::shape("dataset", format!("{} labels for {n} images", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(L2dError::InvalidArgument(format!("label {bad} outside [0, {num_classes})")));
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(L2dError::InvalidArgument(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(LabeledDataset { name: name.into(), images, labels, num_classes })
    }

    /// Grayscale raw images: bilinear resize to 32x32, replicate into 3 channels,
    /// map `0..=255` onto `[-1, 1]`.
    pub fn from_raw(name: impl Into<String>, raw: &RawImages, labels: &[u8], num_classes: usize) -> Result<Self> {
        if raw.count != labels.len() {
            return Err(L2dError::shape("dataset", format!("{} labels for {} images", labels.len(), raw.count)));
        }
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut data = Vec::with_capacity(raw.count * IMAGE_CHANNELS * plane);
        for img in raw.pixels.chunks(raw.rows * raw.cols) {
            let src: Vec<f64> = img.iter().map(|&p| p as f64).collect();
            let resized = bilinear_resize(&src, raw.rows, raw.cols, IMAGE_SIDE, IMAGE_SIDE);
            let scaled: Vec<f64> = resized.iter().map(|v| (v / 127.5 - 1.0).clamp(-1.0, 1.0)).collect();
            for _ in 0..IMAGE_CHANNELS {
                data.extend_from_slice(&scaled);
            }
        }
        let images = Tensor::new(vec![raw.count, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
        Self::new(name, images, labels.iter().map(|&y| y as usize).collect(), num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Same labels, new pixels (validated), new name.
    pub fn with_images(&self, name: impl Into<String>, images: Tensor) -> Result<Self> {
        Self::new(name, images, self.labels.clone(), self.num_classes)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
        &self.images.data()[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(self.name.clone(), images, labels, self.num_classes)
    }

    /// Gather images and labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// Shuffle with `rng`, then cut consecutive pieces of the requested sizes.
    pub fn split(&self, sizes: &[usize], rng: &mut StreamRng) -> Result<Vec<Self>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(L2dError::InvalidArgument(format!(
                "split sizes {sizes:?} need {total} images, dataset {} has {}",
                self.name,
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let part = self.subset(&order[start..start + s]);
                start += s;
                part
            })
            .collect()
    }

    /// Labels as IDX bytes (classes must fit in a byte).
    pub fn labels_u8(&self) -> Result<Vec<u8>> {
        self.labels
            .iter()
            .map(|&y| u8::try_from(y).map_err(|_| L2dError::InvalidArgument(format!("label {y} exceeds 255"))))
            .collect()
    }

    /// Store as a checkpoint container with `images`, `labels` and `num_classes` arrays.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("images", self.images.clone())?;
        ckpt.insert("labels", Tensor::new(vec![self.len()], self.labels.iter().map(|&y| y as f64).collect())?)?;
        ckpt.insert("num_classes", Tensor::scalar(self.num_classes as f64))?;
        ckpt.save(path)
    }

    pub fn load_cache(path: &Path, name: impl Into<String>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let labels = ckpt
            .require("labels")?
            .data()
            .iter()
            .map(|&y| {
                if y >= 0.0 && y.fract() == 0.0 {
                    Ok(y as usize)
                } else {
                    Err(L2dError::format(path, format!("label {y} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = ckpt.require("num_classes")?.item()?;
        Self::new(name, ckpt.require("images")?.clone(), labels, classes as usize)
            .map_err(|e| L2dError::format(path, e.to_string()))
    }
}

/// Load an MNIST-style IDX pair (plain or gzip) as a 10-class dataset.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let (raw, labels) = idx::read_idx_pair(image_path, label_path)?;
    if let Some(bad) = labels.iter().find(|&&y| y >= 10) {
        return Err(L2dError::format(label_path, format!("label {bad} outside the 10 digit classes")));
    }
    LabeledDataset::from_raw("mnist", &raw, &labels, 10)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let axis = |dst: usize, n_src: usize, n_dst: usize| {
        let pos = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(n_src - 1);
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for r in 0..dh {
        let (r0, r1, fr) = axis(r, sh, dh);
        for c in 0..dw {
            let (c0, c1, fc) = axis(c, sw, dw);
            let top = src[r0 * sw + c0] * (1.0 - fc) + src[r0 * sw + c1] * fc;
            let bottom = src[r1 * sw + c0] * (1.0 - fc) + src[r1 * sw + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}
