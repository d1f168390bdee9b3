//! Style-complement generator: `K` random conv/deconv projections, each with a
//! learnable per-element mean and scale shift applied to instance-normalized
//! features, mixed with normally distributed weights.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::write_atomic;
use crate::error::{L2dError, Result};
use crate::model::{uniform_init, Parameterized};
use crate::rng::StreamRng;
use crate::tensor::{instance_mean_var, Tape, Tensor, Var, VAR_EPS};

/// Default kernel sizes for six transformations.
pub const DEFAULT_KERNEL_SIZES: [usize; 6] = [1, 3, 5, 7, 9, 11];
/// Resample the mixing weights while `|sum w| < MIX_GUARD`.
pub const MIX_GUARD: f64 = 0.1;

/// Restyle `f` `[B, C, H, W]`: normalize each sample-channel plane by its own
/// statistics, then scale by `sigma` and shift by `mu`, both `[C, H, W]` and
/// shared across the batch.
pub fn style_shift(tape: &mut Tape, f: Var, mu: Var, sigma: Var) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    let &[b, c, h, w] = shape.as_slice() else {
        return Err(L2dError::shape("style_shift", format!("expected [B, C, H, W], got {shape:?}")));
    };
    for p in [mu, sigma] {
        if tape.shape(p) != [c, h, w] {
            return Err(L2dError::shape(
                "style_shift",
                format!("features {shape:?} vs style parameter {:?}", tape.shape(p)),
            ));
        }
    }
    let (mean, var) = instance_mean_var(tape, f)?;
    let mean = tape.reshape(mean, &[b, c, 1, 1])?;
    let mean = tape.broadcast_to(mean, &shape)?;
    let std = tape.add_scalar(var, VAR_EPS);
    let std = tape.sqrt(std);
    let std = tape.reshape(std, &[b, c, 1, 1])?;
    let std = tape.broadcast_to(std, &shape)?;
    let centered = tape.sub(f, mean)?;
    let normalized = tape.div(centered, std)?;

    let sigma = tape.reshape(sigma, &[1, c, h, w])?;
    let sigma = tape.broadcast_to(sigma, &shape)?;
    let mu = tape.reshape(mu, &[1, c, h, w])?;
    let mu = tape.broadcast_to(mu, &shape)?;
    let scaled = tape.mul(normalized, sigma)?;
    tape.add(scaled, mu)
}

/// One conv -> style shift -> transposed conv branch.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTransformation {
    kernel_size: usize,
    conv_kernel: Tensor,
    deconv_kernel: Tensor,
    mean_shift: Tensor,
    var_shift: Tensor,
}

impl StyleTransformation {
    fn new(kernel_size: usize, channels: usize, height: usize, width: usize) -> Self {
        let k = kernel_size;
        StyleTransformation {
            kernel_size,
            conv_kernel: Tensor::zeros(vec![channels, channels, k, k]),
            deconv_kernel: Tensor::zeros(vec![channels, channels, k, k]),
            mean_shift: Tensor::zeros(vec![channels, height, width]),
            var_shift: Tensor::full(vec![channels, height, width], 1.0),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn conv_kernel(&self) -> &Tensor {
        &self.conv_kernel
    }

    pub fn deconv_kernel(&self) -> &Tensor {
        &self.deconv_kernel
    }

    pub fn mean_shift(&self) -> &Tensor {
        &self.mean_shift
    }

    pub fn var_shift(&self) -> &Tensor {
        &self.var_shift
    }

    pub fn mean_shift_mut(&mut self) -> &mut Tensor {
        &mut self.mean_shift
    }

    pub fn var_shift_mut(&mut self) -> &mut Tensor {
        &mut self.var_shift
    }

    /// Half-open bound of the uniform kernel draw: `1/sqrt(channels * k * k)`.
    pub fn kernel_bound(&self) -> f64 {
        1.0 / (self.fan_in() as f64).sqrt()
    }

    fn fan_in(&self) -> usize {
        self.conv_kernel.shape()[1] * self.kernel_size * self.kernel_size
    }

    fn reinit(&mut self, rng: &mut StreamRng) {
        let fan_in = self.fan_in();
        self.conv_kernel = uniform_init(self.conv_kernel.shape(), fan_in, rng);
        self.deconv_kernel = uniform_init(self.deconv_kernel.shape(), fan_in, rng);
    }

    /// Replace both kernels with the channel-wise identity (unit center tap).
    pub fn set_identity_kernels(&mut self) {
        let c = self.conv_kernel.shape()[0];
        let k = self.kernel_size;
        let center = k / 2;
        let identity = Tensor::from_fn(vec![c, c, k, k], |i| {
            let (o, rest) = (i / (c * k * k), i % (c * k * k));
            let (ic, tap) = (rest / (k * k), rest % (k * k));
            if o == ic && tap == center * k + center {
                1.0
            } else {
                0.0
            }
        });
        self.conv_kernel = identity.clone();
        self.deconv_kernel = identity;
    }
}

/// Tape handles for one transformation.
#[derive(Clone, Copy, Debug)]
pub struct TransformationVars {
    pub conv_kernel: Var,
    pub deconv_kernel: Var,
    pub mean_shift: Var,
    pub var_shift: Var,
    pub padding: usize,
}

/// `conv2d -> style_shift -> conv_transpose2d`, preserving `[B, 3, H, W]`.
/// With `modulate == false` the style layer is skipped.
pub fn apply_transformation(tape: &mut Tape, x: Var, t: &TransformationVars, modulate: bool) -> Result<Var> {
    let f = tape.conv2d(x, t.conv_kernel, 1, t.padding)?;
    let f = if modulate { style_shift(tape, f, t.mean_shift, t.var_shift)? } else { f };
    tape.conv_transpose2d(f, t.deconv_kernel, 1, t.padding)
}

/// Normal mixing weights with a guard against a vanishing sum.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights {
    raw: Vec<f64>,
}

impl MixWeights {
    /// Draw `k` standard-normal weights, redrawing the whole vector until `|sum| >= guard`.
    pub fn sample(k: usize, guard: f64, rng: &mut StreamRng) -> Result<Self> {
        if k == 0 {
            return Err(L2dError::InvalidArgument("at least one transformation is required".into()));
        }
        loop {
            let raw: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            if raw.iter().sum::<f64>().abs() >= guard {
                return Ok(MixWeights { raw });
            }
        }
    }

    /// Explicit weights; rejected when their sum is within `guard` of zero.
    pub fn from_raw(raw: Vec<f64>, guard: f64) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if raw.is_empty() || !sum.is_finite() || sum.abs() < guard {
            return Err(L2dError::InvalidArgument(format!("mixing weights {raw:?} sum to {sum}")));
        }
        Ok(MixWeights { raw })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// `w_k / sum w`.
    pub fn coefficients(&self) -> Vec<f64> {
        let sum: f64 = self.raw.iter().sum();
        self.raw.iter().map(|w| w / sum).collect()
    }
}

/// Construction parameters of a [`StyleComplementModule`].
#[derive(Clone, Debug, PartialEq)]
pub struct StyleConfig {
    pub kernel_sizes: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mix_guard: f64,
    /// `false` removes the learnable style layer (the transformations become pure random projections).
    pub modulate: bool,
}

impl StyleConfig {
    /// `k` transformations with kernel sizes `1, 3, 5, ...` over `3 x 32 x 32` images.
    pub fn with_k(k: usize) -> Self {
        StyleConfig {
            kernel_sizes: (0..k).map(|i| 2 * i + 1).collect(),
            channels: 3,
            height: 32,
            width: 32,
            mix_guard: MIX_GUARD,
            modulate: true,
        }
    }
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig::with_k(DEFAULT_KERNEL_SIZES.len())
    }
}

/// The generator `G`. Only the mean and scale shifts are parameters; the
/// projection kernels are redrawn by [`reinit`](Self::reinit).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleComplementModule {
    config: StyleConfig,
    transformations: Vec<StyleTransformation>,
}

/// Tape handles for a bound generator.
#[derive(Clone, Debug)]
pub struct StyleVars {
    pub transformations: Vec<TransformationVars>,
    pub modulate: bool,
}

impl StyleComplementModule {
    /// Build the module with zero mean shifts, unit scale shifts and kernels drawn from `rng`.
    pub fn new(config: StyleConfig, rng: &mut StreamRng) -> Result<Self> {
        let sizes = &config.kernel_sizes;
        if sizes.is_empty() {
            return Err(L2dError::InvalidArgument("at least one transformation is required".into()));
        }
        if let Some(k) = sizes.iter().find(|&&k| k % 2 == 0 || k == 0) {
            return Err(L2dError::InvalidArgument(format!("kernel size {k} is not a positive odd number")));
        }
        let mut sorted = sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != sizes.len() {
            return Err(L2dError::InvalidArgument(format!("kernel sizes {sizes:?} are not distinct")));
        }
        if config.channels == 0 || config.height == 0 || config.width == 0 {
            return Err(L2dError::InvalidArgument("image geometry must be non-empty".into()));
        }
        if !(config.mix_guard > 0.0) {
            return Err(L2dError::InvalidArgument(format!("mix guard must be positive, got {}", config.mix_guard)));
        }
        let transformations =
            sizes.iter().map(|&k| StyleTransformation::new(k, config.channels, config.height, config.width)).collect();
        let mut module = StyleComplementModule { config, transformations };
        module.reinit(rng);
        Ok(module)
    }

    pub fn config(&self) -> &StyleConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.transformations.len()
    }

    pub fn transformations(&self) -> &[StyleTransformation] {
        &self.transformations
    }

    pub fn transformations_mut(&mut self) -> &mut [StyleTransformation] {
        &mut self.transformations
    }

    /// Redraw every conv and deconv kernel; the style shifts are left alone.
    pub fn reinit(&mut self, rng: &mut StreamRng) {
        for t in &mut self.transformations {
            t.reinit(rng);
        }
    }

    pub fn draw_weights(&self, rng: &mut StreamRng) -> Result<MixWeights> {
        MixWeights::sample(self.k(), self.config.mix_guard, rng)
    }

    /// Record the generator on `tape`. Kernels are always constants; the style
    /// shifts are trainable leaves when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> StyleVars {
        let transformations = self
            .transformations
            .iter()
            .map(|t| TransformationVars {
                conv_kernel: tape.constant(t.conv_kernel.clone()),
                deconv_kernel: tape.constant(t.deconv_kernel.clone()),
                mean_shift: tape.leaf(t.mean_shift.clone(), trainable),
                var_shift: tape.leaf(t.var_shift.clone(), trainable),
                padding: (t.kernel_size - 1) / 2,
            })
            .collect();
        StyleVars { transformations, modulate: self.config.modulate }
    }

    /// Forward-only generation of `x+` for an image batch.
    pub fn generate(&self, x: &Tensor, weights: &MixWeights) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = vars.generate(&mut tape, xv, weights)?;
        Ok(tape.value(out).clone())
    }

    /// Draw fresh weights from `rng` and generate.
    pub fn generate_with_rng(&self, x: &Tensor, rng: &mut StreamRng) -> Result<(Tensor, MixWeights)> {
        let weights = self.draw_weights(rng)?;
        let out = self.generate(x, &weights)?;
        Ok((out, weights))
    }
}

impl StyleVars {
    /// Mean and scale shift handles, in transformation order.
    pub fn params(&self) -> Vec<Var> {
        self.transformations.iter().flat_map(|t| [t.mean_shift, t.var_shift]).collect()
    }

    /// `x+ = sum_k (w_k / sum w) tanh(T_k(x))`.
    pub fn generate(&self, tape: &mut Tape, x: Var, weights: &MixWeights) -> Result<Var> {
        if weights.raw().len() != self.transformations.len() {
            return Err(L2dError::InvalidArgument(format!(
                "{} mixing weights for {} transformations",
                weights.raw().len(),
                self.transformations.len()
            )));
        }
        let mut acc = None;
        for (t, c) in self.transformations.iter().zip(weights.coefficients()) {
            let out = apply_transformation(tape, x, t, self.modulate)?;
            let act = tape.tanh(out);
            let term = tape.scale(act, c);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        acc.ok_or_else(|| L2dError::InvalidArgument("no transformations".into()))
    }
}

impl Parameterized for StyleComplementModule {
    fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        self.transformations.iter().flat_map(|t| [("mu", &t.mean_shift), ("sigma", &t.var_shift)]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.transformations.iter_mut().flat_map(|t| [&mut t.mean_shift, &mut t.var_shift]).collect()
    }

    fn write_to(&self, prefix: &str, ckpt: &mut crate::checkpoint::Checkpoint) -> Result<()> {
        for t in &self.transformations {
            let k = t.kernel_size;
            ckpt.insert(format!("{prefix}.k{k}.mu"), t.mean_shift.clone())?;
            ckpt.insert(format!("{prefix}.k{k}.sigma"), t.var_shift.clone())?;
        }
        Ok(())
    }

    fn read_from(&mut self, prefix: &str, ckpt: &crate::checkpoint::Checkpoint) -> Result<()> {
        for t in &mut self.transformations {
            let k = t.kernel_size;
            for (name, slot) in [("mu", &mut t.mean_shift), ("sigma", &mut t.var_shift)] {
                let key = format!("{prefix}.k{k}.{name}");
                let stored = ckpt.require(&key)?;
                if stored.shape() != slot.shape() {
                    return Err(L2dError::shape("checkpoint", format!("{key}: {:?}", stored.shape())));
                }
                *slot = stored.clone();
            }
        }
        Ok(())
    }
}

/// Write the first `max_images` images of `[B, C, H, W]` in `[-1, 1]` as one
/// binary PGM (one channel) or PPM (three channels), tiled horizontally.
pub fn export_batch(path: &Path, images: &Tensor, max_images: usize) -> Result<()> {
    let &[b, c, h, w] = images.shape() else {
        return Err(L2dError::shape("export_batch", format!("expected [B, C, H, W], got {:?}", images.shape())));
    };
    if c != 1 && c != 3 {
        return Err(L2dError::shape("export_batch", format!("{c} channels; need 1 or 3")));
    }
    let n = b.min(max_images);
    if n == 0 {
        return Err(L2dError::InvalidArgument("empty batch".into()));
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = Vec::new();
    write!(out, "{magic}\n{} {h}\n255\n", n * w).map_err(|e| L2dError::io(path, e))?;
    let data = images.data();
    for row in 0..h {
        for img in 0..n {
            for col in 0..w {
                for ch in 0..c {
                    let v = data[((img * c + ch) * h + row) * w + col];
                    out.push((((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8);
                }
            }
        }
    }
    write_atomic(path, &out)
}
