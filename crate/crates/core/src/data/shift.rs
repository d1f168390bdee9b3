//! Synthetic target domains: corruption families with five severities and a
//! colored-background composite.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::dataset::{bilinear_resize, LabeledDataset};
use crate::error::{L2dError, Result};
use crate::model::{IMAGE_CHANNELS, IMAGE_SIDE};
use crate::rng::{SeedTree, StreamRng};
use crate::tensor::Tensor;

pub const MAX_SEVERITY: u8 = 5;

const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const BLUR_SIGMA: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];
const FOG_BLEND: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const PIXELATE_BLOCK: [f64; 5] = [2.0, 3.0, 4.0, 6.0, 8.0];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];

/// Corruption families, grouped as noise, blur, weather and digital.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftFamily {
    /// Additive Gaussian noise.
    Noise,
    /// Gaussian blur.
    Blur,
    /// Blend towards a smooth bright fog field.
    Weather,
    /// Block averaging.
    Pixelate,
    /// Contraction towards the per-image channel mean.
    Contrast,
    /// `x -> -x`; every positive severity is the same map.
    Invert,
}

impl ShiftFamily {
    pub const ALL: [ShiftFamily; 6] = [
        ShiftFamily::Noise,
        ShiftFamily::Blur,
        ShiftFamily::Weather,
        ShiftFamily::Pixelate,
        ShiftFamily::Contrast,
        ShiftFamily::Invert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftFamily::Noise => "noise",
            ShiftFamily::Blur => "blur",
            ShiftFamily::Weather => "weather",
            ShiftFamily::Pixelate => "pixelate",
            ShiftFamily::Contrast => "contrast",
            ShiftFamily::Invert => "invert",
        }
    }

    /// Coarse group: `noise`, `blur`, `weather` or `digital`.
    pub fn category(self) -> &'static str {
        match self {
            ShiftFamily::Noise => "noise",
            ShiftFamily::Blur => "blur",
            ShiftFamily::Weather => "weather",
            ShiftFamily::Pixelate | ShiftFamily::Contrast | ShiftFamily::Invert => "digital",
        }
    }

    /// Per-severity parameter table (severities 1 to 5), if the family has one.
    pub fn parameters(self) -> Option<&'static [f64; 5]> {
        match self {
            ShiftFamily::Noise => Some(&NOISE_SIGMA),
            ShiftFamily::Blur => Some(&BLUR_SIGMA),
            ShiftFamily::Weather => Some(&FOG_BLEND),
            ShiftFamily::Pixelate => Some(&PIXELATE_BLOCK),
            ShiftFamily::Contrast => Some(&CONTRAST_FACTOR),
            ShiftFamily::Invert => None,
        }
    }
}

impl fmt::Display for ShiftFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftFamily {
    type Err = L2dError;

    fn from_str(s: &str) -> Result<Self> {
        ShiftFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| L2dError::InvalidArgument(format!("unknown shift family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ShiftSpec {
    pub family: ShiftFamily,
    severity: u8,
}

impl ShiftSpec {
    /// Severity 0 is the identity; 1 to 5 are increasingly strong.
    pub fn new(family: ShiftFamily, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(L2dError::InvalidArgument(format!("severity {severity} outside [0, {MAX_SEVERITY}]")));
        }
        Ok(ShiftSpec { family, severity })
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    /// The family parameter at this severity (`None` at severity 0 or for inversion).
    pub fn parameter(&self) -> Option<f64> {
        let table = self.family.parameters()?;
        (self.severity > 0).then(|| table[self.severity as usize - 1])
    }

    pub fn label(&self) -> String {
        format!("{}-s{}", self.family, self.severity)
    }
}

const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;
const IMAGE_LEN: usize = IMAGE_CHANNELS * PLANE;

/// Apply `f(image, rng)` to every image in parallel; image `i` draws from its own
/// sub-stream so results do not depend on scheduling.
fn map_images(
    ds: &LabeledDataset,
    name: String,
    seeds: &SeedTree,
    stream: &str,
    f: impl Fn(&[f64], &mut StreamRng) -> Vec<f64> + Sync,
) -> Result<LabeledDataset> {
    let mut data = vec![0.0; ds.images().len()];
    data.par_chunks_mut(IMAGE_LEN).enumerate().for_each(|(i, out)| {
        let mut rng = seeds.indexed(stream, i as u64);
        let shifted = f(ds.image(i), &mut rng);
        for (o, v) in out.iter_mut().zip(shifted) {
            *o = v.clamp(-1.0, 1.0);
        }
    });
    ds.with_images(name, Tensor::new(ds.images().shape().to_vec(), data)?)
}

/// Label-preserving corruption of every image; output clamped to `[-1, 1]`.
/// Random draws depend only on the seed and the family, so severities share them.
pub fn apply_shift(ds: &LabeledDataset, spec: ShiftSpec, seed: u64) -> Result<LabeledDataset> {
    let name = format!("{}/{}", ds.name, spec.label());
    if spec.severity == 0 {
        let mut out = ds.clone();
        out.name = name;
        return Ok(out);
    }
    let seeds = SeedTree::new(seed);
    let stream = format!("shift-{}", spec.family);
    let p = spec.parameter().unwrap_or(0.0);
    match spec.family {
        ShiftFamily::Noise => map_images(ds, name, &seeds, &stream, |img, rng| {
            img.iter().map(|&v| v + p * rng.sample::<f64, _>(StandardNormal)).collect()
        }),
        ShiftFamily::Blur => {
            let taps = gaussian_taps(p);
            map_images(ds, name, &seeds, &stream, |img, _| {
                img.chunks(PLANE).flat_map(|plane| blur_plane(plane, &taps)).collect()
            })
        }
        ShiftFamily::Weather => map_images(ds, name, &seeds, &stream, |img, rng| {
            let fog = fog_field(rng);
            img.chunks(PLANE)
                .flat_map(|plane| plane.iter().zip(&fog).map(|(&v, &g)| (1.0 - p) * v + p * g).collect::<Vec<_>>())
                .collect()
        }),
        ShiftFamily::Pixelate => map_images(ds, name, &seeds, &stream, |img, _| {
            img.chunks(PLANE).flat_map(|plane| pixelate_plane(plane, p as usize)).collect()
        }),
        ShiftFamily::Contrast => map_images(ds, name, &seeds, &stream, |img, _| {
            img.chunks(PLANE)
                .flat_map(|plane| {
                    let mean = plane.iter().sum::<f64>() / PLANE as f64;
                    plane.iter().map(|&v| mean + p * (v - mean)).collect::<Vec<_>>()
                })
                .collect()
        }),
        ShiftFamily::Invert => map_images(ds, name, &seeds, &stream, |img, _| img.iter().map(|v| -v).collect()),
    }
}

/// Normalized Gaussian taps with radius `ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable blur with clamp-to-edge borders.
fn blur_plane(plane: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = IMAGE_SIDE as i64;
    let radius = (taps.len() / 2) as i64;
    let at = |i: i64| i.clamp(0, n - 1) as usize;
    let mut rows = vec![0.0; PLANE];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            rows[r * IMAGE_SIDE + c] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * plane[r * IMAGE_SIDE + at(c as i64 + t as i64 - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; PLANE];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            out[r * IMAGE_SIDE + c] =
                taps.iter().enumerate().map(|(t, w)| w * rows[at(r as i64 + t as i64 - radius) * IMAGE_SIDE + c]).sum();
        }
    }
    out
}

/// Replace each `block x block` tile (ragged at the far edges) by its mean.
fn pixelate_plane(plane: &[f64], block: usize) -> Vec<f64> {
    let mut out = vec![0.0; PLANE];
    for r0 in (0..IMAGE_SIDE).step_by(block) {
        for c0 in (0..IMAGE_SIDE).step_by(block) {
            let rows = r0..(r0 + block).min(IMAGE_SIDE);
            let cols = c0..(c0 + block).min(IMAGE_SIDE);
            let count = (rows.len() * cols.len()) as f64;
            let mean =
                rows.clone().flat_map(|r| cols.clone().map(move |c| plane[r * IMAGE_SIDE + c])).sum::<f64>() / count;
            for r in rows {
                for c in cols.clone() {
                    out[r * IMAGE_SIDE + c] = mean;
                }
            }
        }
    }
    out
}

/// Smooth bright field in `[0.2, 1]`: a 4x4 uniform lattice upsampled bilinearly.
fn fog_field(rng: &mut StreamRng) -> Vec<f64> {
    let lattice: Vec<f64> = (0..16).map(|_| rng.random_range(0.2..1.0)).collect();
    bilinear_resize(&lattice, 4, 4, IMAGE_SIDE, IMAGE_SIDE)
}

/// Digits composited over random color patches: `|background - digit|` on the
/// `[0, 1]` scale, as in MNIST-M style blends.
pub fn colored_background(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let seeds = SeedTree::new(seed);
    map_images(ds, format!("{}/colored", ds.name), &seeds, "shift-colored", |img, rng| {
        // 4x4 lattice of independent RGB colors, upsampled
        let channels: Vec<Vec<f64>> = (0..IMAGE_CHANNELS)
            .map(|_| {
                let lattice: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
                bilinear_resize(&lattice, 4, 4, IMAGE_SIDE, IMAGE_SIDE)
            })
            .collect();
        img.chunks(PLANE)
            .zip(&channels)
            .flat_map(|(plane, bg)| {
                plane
                    .iter()
                    .zip(bg)
                    .map(|(&v, &b)| {
                        let digit = (v + 1.0) / 2.0;
                        2.0 * (b - digit).abs() - 1.0
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    })
}

/// The fixed evaluation suite: inverted, colored background, noise, blur and
/// pixelation at severity 3.
pub fn make_eval_suite(source: &LabeledDataset, seed: u64) -> Result<Vec<LabeledDataset>> {
    let mut suite = vec![
        rename(apply_shift(source, ShiftSpec::new(ShiftFamily::Invert, 1)?, seed)?, "inverted"),
        rename(colored_background(source, seed)?, "colored"),
    ];
    for family in [ShiftFamily::Noise, ShiftFamily::Blur, ShiftFamily::Pixelate] {
        let spec = ShiftSpec::new(family, 3)?;
        suite.push(rename(apply_shift(source, spec, seed)?, &spec.label()));
    }
    Ok(suite)
}

fn rename(mut ds: LabeledDataset, name: &str) -> LabeledDataset {
    ds.name = name.to_owned();
    ds
}

/// Mean over pixels of the population variance across the three channels.
pub fn channel_variance(image: &[f64]) -> f64 {
    let planes: Vec<&[f64]> = image.chunks(PLANE).collect();
    let c = planes.len() as f64;
    (0..PLANE)
        .map(|p| {
            let mean = planes.iter().map(|pl| pl[p]).sum::<f64>() / c;
            planes.iter().map(|pl| (pl[p] - mean).powi(2)).sum::<f64>() / c
        })
        .sum::<f64>()
        / PLANE as f64
}

/// Mean per-image L2 distance between two equally shaped datasets.
pub fn mean_l2_distortion(a: &LabeledDataset, b: &LabeledDataset) -> Result<f64> {
    if a.images().shape() != b.images().shape() {
        return Err(L2dError::shape(
            "mean_l2_distortion",
            format!("{:?} vs {:?}", a.images().shape(), b.images().shape()),
        ));
    }
    let n = a.len().max(1) as f64;
    Ok((0..a.len())
        .map(|i| a.image(i).iter().zip(b.image(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n)
}
