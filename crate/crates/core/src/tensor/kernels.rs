//! Raw numeric kernels behind the tape: GEMM, im2col/col2im convolutions and pooling.
//!
//! Everything works on row-major slices. Per-sample work is spread over the rayon
//! pool; reductions across samples are always summed in sample order so results do
//! not depend on the thread count.

use rayon::prelude::*;

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)` `k x n`.
///
/// With `a_t` set, `a` is stored as `k x m`; with `b_t` set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated layouts exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry shared by a convolution and its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold one `C x H x W` image into a `(C*k*k) x (Ho*Wo)` patch matrix.
pub fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into a `C x H x W` image.
pub fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Direct stride-1 kernels are used when a convolution mixes only a few channels,
/// where unfolding into a patch matrix costs more than the arithmetic.
const DIRECT_MAX_CHANNEL_PAIRS: usize = 16;

fn use_direct(g: &ConvGeometry, cout: usize) -> bool {
    g.stride == 1 && g.channels * cout <= DIRECT_MAX_CHANNEL_PAIRS
}

/// Output-column range `[lo, hi)` whose input column `o + tap - padding` lies inside `[0, len)`.
fn valid_range(tap: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(tap);
    let hi = (len + padding).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

/// `y[o] += sum_i k[o, i] * shift(x[i])`: one image, stride 1.
fn direct_correlate(x: &[f64], g: &ConvGeometry, kernel: &[f64], cout: usize, y: &mut [f64]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.padding);
    let (ho, wo) = (g.out_height(), g.out_width());
    for o in 0..cout {
        let out = &mut y[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..g.channels {
            let plane = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, p, h, ho);
                for kx in 0..k {
                    let wv = kernel[((o * g.channels + i) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, p, w, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - p;
                        let src = &plane[iy * w + ox_lo + kx - p..iy * w + ox_hi + kx - p];
                        let dst = &mut out[oy * wo + ox_lo..oy * wo + ox_hi];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`direct_correlate`]: `dx[i] += sum_o k[o, i] * unshift(dy[o])`.
fn direct_scatter(dy: &[f64], g: &ConvGeometry, kernel: &[f64], cout: usize, dx: &mut [f64]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.padding);
    let (ho, wo) = (g.out_height(), g.out_width());
    for o in 0..cout {
        let grad = &dy[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..g.channels {
            let plane = &mut dx[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, p, h, ho);
                for kx in 0..k {
                    let wv = kernel[((o * g.channels + i) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, p, w, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - p;
                        let dst = &mut plane[iy * w + ox_lo + kx - p..iy * w + ox_hi + kx - p];
                        let src = &grad[oy * wo + ox_lo..oy * wo + ox_hi];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch `[B, Cin, H, W]` with `[Cout, Cin, k, k]`.
pub fn conv2d_forward(input: &[f64], batch: usize, g: &ConvGeometry, kernel: &[f64], cout: usize) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = cout * g.col_cols();
    let mut out = vec![0.0; batch * out_len];
    out.par_chunks_mut(out_len).zip(input.par_chunks(in_len)).for_each(|(y, x)| {
        if use_direct(g, cout) {
            direct_correlate(x, g, kernel, cout, y);
            return;
        }
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(x, g, &mut cols);
        gemm(cout, g.col_rows(), g.col_cols(), kernel, false, &cols, false, 0.0, y);
    });
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &[f64], batch: usize, g: &ConvGeometry, kernel: &[f64], cout: usize) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = cout * g.col_cols();
    let mut dx = vec![0.0; batch * in_len];
    dx.par_chunks_mut(in_len).zip(grad_out.par_chunks(out_len)).for_each(|(dx, dy)| {
        if use_direct(g, cout) {
            direct_scatter(dy, g, kernel, cout, dx);
            return;
        }
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        gemm(g.col_rows(), cout, g.col_cols(), kernel, true, dy, false, 0.0, &mut cols);
        col2im(&cols, g, dx);
    });
    dx
}

/// Gradient of [`conv2d_forward`] with respect to its kernel.
pub fn conv2d_grad_kernel(grad_out: &[f64], input: &[f64], batch: usize, g: &ConvGeometry, cout: usize) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = cout * g.col_cols();
    let k_len = cout * g.col_rows();
    let partials: Vec<Vec<f64>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
            let mut dk = vec![0.0; k_len];
            gemm(
                cout,
                g.col_cols(),
                g.col_rows(),
                &grad_out[b * out_len..(b + 1) * out_len],
                false,
                &cols,
                true,
                0.0,
                &mut dk,
            );
            dk
        })
        .collect();
    sum_in_order(partials, k_len)
}

/// Transposed convolution of `[B, Cin, H, W]` with a `[Cin, Cout, k, k]` kernel.
///
/// `g` describes the *output* image (`Cout x Ho x Wo`) seen as the input of the
/// matching forward convolution, so `g.out_height() == H`.
pub fn conv_transpose2d_forward(input: &[f64], batch: usize, cin: usize, g: &ConvGeometry, kernel: &[f64]) -> Vec<f64> {
    let in_len = cin * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_len];
    out.par_chunks_mut(out_len).zip(input.par_chunks(in_len)).for_each(|(y, x)| {
        if use_direct(g, cin) {
            direct_scatter(x, g, kernel, cin, y);
            return;
        }
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        gemm(g.col_rows(), cin, g.col_cols(), kernel, true, x, false, 0.0, &mut cols);
        col2im(&cols, g, y);
    });
    out
}

pub fn conv_transpose2d_grad_input(
    grad_out: &[f64],
    batch: usize,
    cin: usize,
    g: &ConvGeometry,
    kernel: &[f64],
) -> Vec<f64> {
    let in_len = cin * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let mut dx = vec![0.0; batch * in_len];
    dx.par_chunks_mut(in_len).zip(grad_out.par_chunks(out_len)).for_each(|(dx, dy)| {
        if use_direct(g, cin) {
            direct_correlate(dy, g, kernel, cin, dx);
            return;
        }
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(dy, g, &mut cols);
        gemm(cin, g.col_rows(), g.col_cols(), kernel, false, &cols, false, 0.0, dx);
    });
    dx
}

pub fn conv_transpose2d_grad_kernel(
    grad_out: &[f64],
    input: &[f64],
    batch: usize,
    cin: usize,
    g: &ConvGeometry,
) -> Vec<f64> {
    let in_len = cin * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let k_len = cin * g.col_rows();
    let partials: Vec<Vec<f64>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(&grad_out[b * out_len..(b + 1) * out_len], g, &mut cols);
            let mut dk = vec![0.0; k_len];
            gemm(
                cin,
                g.col_cols(),
                g.col_rows(),
                &input[b * in_len..(b + 1) * in_len],
                false,
                &cols,
                true,
                0.0,
                &mut dk,
            );
            dk
        })
        .collect();
    sum_in_order(partials, k_len)
}

fn sum_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    total
}

/// 2x2 max pooling with stride 2 over `planes` planes of `h x w`.
/// Returns the pooled values and, for each, the flat index of the winning input.
pub fn max_pool2(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
