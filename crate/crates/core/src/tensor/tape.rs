//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved state
//! to run its vector-Jacobian product. Node ids grow with execution order, so
//! walking the list backwards from the loss is a reverse topological order.

use crate::error::{L2dError, Result};

use super::kernels::{self, ConvGeometry};
use super::value::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumAxes { input: Var, index_map: Vec<usize> },
    Reshape(Var),
    BroadcastTo { input: Var, index_map: Vec<usize> },
    ConcatRows(Vec<Var>),
    SelectRows { input: Var, rows: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, geometry: ConvGeometry },
    ConvTranspose2d { input: Var, kernel: Var, geometry: ConvGeometry },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    SpatialMean(Var),
    SpatialVar(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    LogSoftmax(Var),
    PickPerRow { input: Var, cols: Vec<usize> },
    PairwiseSqDists(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Nodes that do not require a gradient or are unreachable from the loss have none.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of executed differentiable operations. Confined to one worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(L2dError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, node, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, node, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, index_map) = reduce_index_map(self.shape(a), axes)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&src, &dst) in self.data(a).iter().zip(&index_map) {
            out[dst] += src;
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SumAxes { input: a, index_map }, &[a]))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&ax| self.shape(a).get(ax).copied().unwrap_or(1)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Broadcast to `shape`; `a` must have the same rank with each dimension 1 or equal.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let index_map = broadcast_index_map(self.shape(a), shape)?;
        let src = self.data(a);
        let data = index_map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::BroadcastTo { input: a, index_map }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(rows)?;
        Ok(self.push(value, Op::SelectRows { input: a, rows: rows.to_vec() }, &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(L2dError::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.shape(a))?;
        let value = Tensor::new(vec![n, m], transpose(m, n, self.data(a)))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Row-wise affine map `input * weight^T + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (batch, din) = matrix_dims("linear", self.shape(input))?;
        let (dout, din_w) = matrix_dims("linear", self.shape(weight))?;
        if din != din_w || self.shape(bias) != [dout] {
            return Err(L2dError::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", self.shape(input), self.shape(weight), self.shape(bias)),
            ));
        }
        let mut out = vec![0.0; batch * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.data(bias));
        }
        kernels::gemm(batch, din, dout, self.data(input), false, self.data(weight), true, 1.0, &mut out);
        let value = Tensor::new(vec![batch, dout], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, cin, h, w] = dims4("conv2d", self.shape(input))?;
        let [cout, kcin, kh, kw] = dims4("conv2d", self.shape(kernel))?;
        if kcin != cin || kh != kw || stride == 0 || kh == 0 || h + 2 * padding < kh || w + 2 * padding < kh {
            return Err(L2dError::shape(
                "conv2d",
                format!(
                    "input {:?} vs kernel {:?} (stride {stride}, padding {padding})",
                    self.shape(input),
                    self.shape(kernel)
                ),
            ));
        }
        let geometry = ConvGeometry { channels: cin, height: h, width: w, kernel: kh, stride, padding };
        let out = kernels::conv2d_forward(self.data(input), b, &geometry, self.data(kernel), cout);
        let value = Tensor::new(vec![b, cout, geometry.out_height(), geometry.out_width()], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, geometry }, &[input, kernel]))
    }

    /// Transposed convolution of `[B, Cin, H, W]` with `[Cin, Cout, k, k]`;
    /// output side is `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, cin, h, w] = dims4("conv_transpose2d", self.shape(input))?;
        let [kcin, cout, kh, kw] = dims4("conv_transpose2d", self.shape(kernel))?;
        let bad = kcin != cin
            || kh != kw
            || stride == 0
            || h == 0
            || w == 0
            || (h - 1) * stride + kh <= 2 * padding
            || (w - 1) * stride + kh <= 2 * padding;
        if bad {
            return Err(L2dError::shape(
                "conv_transpose2d",
                format!(
                    "input {:?} vs kernel {:?} (stride {stride}, padding {padding})",
                    self.shape(input),
                    self.shape(kernel)
                ),
            ));
        }
        let geometry = ConvGeometry {
            channels: cout,
            height: (h - 1) * stride + kh - 2 * padding,
            width: (w - 1) * stride + kh - 2 * padding,
            kernel: kh,
            stride,
            padding,
        };
        debug_assert_eq!(geometry.out_height(), h);
        let out = kernels::conv_transpose2d_forward(self.data(input), b, cin, &geometry, self.data(kernel));
        let value = Tensor::new(vec![b, cout, geometry.height, geometry.width], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { input, kernel, geometry }, &[input, kernel]))
    }

    /// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("max_pool2", self.shape(input))?;
        if h < 2 || w < 2 {
            return Err(L2dError::shape("max_pool2", format!("spatial size {h}x{w} below 2x2")));
        }
        let (out, argmax) = kernels::max_pool2(self.data(input), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Per-sample, per-channel mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("spatial_mean", self.shape(input))?;
        if h * w == 0 {
            return Err(L2dError::shape("spatial_mean", "empty spatial extent"));
        }
        let data = self.data(input).chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
        let value = Tensor::new(vec![b, c], data)?;
        Ok(self.push(value, Op::SpatialMean(input), &[input]))
    }

    /// Per-sample, per-channel population variance over the spatial axes.
    pub fn spatial_var(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("spatial_var", self.shape(input))?;
        if h * w == 0 {
            return Err(L2dError::shape("spatial_var", "empty spatial extent"));
        }
        let data = self.data(input).chunks(h * w).map(|p| plane_stats(p).1).collect();
        let value = Tensor::new(vec![b, c], data)?;
        Ok(self.push(value, Op::SpatialVar(input), &[input]))
    }

    /// Divide each row of a `[N, D]` matrix by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let (_, d) = matrix_dims("l2_normalize_rows", self.shape(input))?;
        let src = self.data(input);
        let norms: Vec<f64> =
            src.chunks(d.max(1)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR)).collect();
        let data = src.chunks(d.max(1)).zip(&norms).flat_map(|(r, n)| r.iter().map(move |v| v / n)).collect();
        let value = Tensor::new(self.shape(input).to_vec(), data)?;
        Ok(self.push(value, Op::L2NormalizeRows { input, norms }, &[input]))
    }

    /// Row-wise log-softmax of a `[N, C]` matrix.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let (_, c) = matrix_dims("log_softmax", self.shape(input))?;
        if c == 0 {
            return Err(L2dError::shape("log_softmax", "zero columns"));
        }
        let mut data = Vec::with_capacity(self.value(input).len());
        for row in self.data(input).chunks(c) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(self.shape(input).to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(input), &[input]))
    }

    /// Element `[i, cols[i]]` of each row of a `[N, C]` matrix.
    pub fn pick_per_row(&mut self, input: Var, cols: &[usize]) -> Result<Var> {
        let (n, c) = matrix_dims("pick_per_row", self.shape(input))?;
        if cols.len() != n {
            return Err(L2dError::shape("pick_per_row", format!("{} indices for {n} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(L2dError::InvalidArgument(format!("column {bad} out of range for {c} columns")));
        }
        let src = self.data(input);
        let data = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let value = Tensor::new(vec![n], data)?;
        Ok(self.push(value, Op::PickPerRow { input, cols: cols.to_vec() }, &[input]))
    }

    /// Squared Euclidean distances between the rows of `[N, D]` and `[M, D]`.
    pub fn pairwise_sq_dists(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = matrix_dims("pairwise_sq_dists", self.shape(a))?;
        let (m, d2) = matrix_dims("pairwise_sq_dists", self.shape(b))?;
        if d != d2 {
            return Err(L2dError::shape("pairwise_sq_dists", format!("{n}x{d} vs {m}x{d2}")));
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &xa[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &xb[j * d..(j + 1) * d];
                out.push(ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::PairwiseSqDists(a, b), &[a, b]))
    }

    /// Accumulate d`loss`/d`v` for every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(L2dError::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::new(self.nodes[id].value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let map1 =
            |f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> { g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect() };
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (xa, xb) = (self.data(a), self.data(b));
                if self.wants(a) {
                    self.accumulate(grads, a, map1(&|i, gi| gi * xb[i]));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, map1(&|i, gi| gi * xa[i]));
                }
            }
            &Op::Div(a, b) => {
                let (xa, xb) = (self.data(a), self.data(b));
                if self.wants(a) {
                    self.accumulate(grads, a, map1(&|i, gi| gi / xb[i]));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, map1(&|i, gi| -gi * xa[i] / (xb[i] * xb[i])));
                }
            }
            &Op::Neg(a) => self.accumulate(grads, a, g.iter().map(|v| -v).collect()),
            &Op::Scale(a, c) => self.accumulate(grads, a, g.iter().map(|v| c * v).collect()),
            &Op::AddScalar(a) => self.accumulate(grads, a, g.to_vec()),
            &Op::Tanh(a) => self.accumulate(grads, a, map1(&|i, gi| gi * (1.0 - y[i] * y[i]))),
            &Op::Relu(a) => {
                let x = self.data(a);
                self.accumulate(grads, a, map1(&|i, gi| if x[i] > 0.0 { gi } else { 0.0 }));
            }
            &Op::Exp(a) => self.accumulate(grads, a, map1(&|i, gi| gi * y[i])),
            &Op::Log(a) => {
                let x = self.data(a);
                self.accumulate(grads, a, map1(&|i, gi| gi / x[i]));
            }
            &Op::Sqrt(a) => self.accumulate(grads, a, map1(&|i, gi| gi / (2.0 * y[i]))),
            &Op::Square(a) => {
                let x = self.data(a);
                self.accumulate(grads, a, map1(&|i, gi| 2.0 * gi * x[i]));
            }
            &Op::Clamp(a, lo, hi) => {
                let x = self.data(a);
                self.accumulate(grads, a, map1(&|i, gi| if x[i] >= lo && x[i] <= hi { gi } else { 0.0 }));
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            Op::SumAxes { input, index_map } => {
                self.accumulate(grads, *input, index_map.iter().map(|&j| g[j]).collect());
            }
            &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::BroadcastTo { input, index_map } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&src, &gv) in index_map.iter().zip(g) {
                    gi[src] += gv;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SelectRows { input, rows } => {
                let row_len = self.value(*input).row_len();
                let mut gi = vec![0.0; self.value(*input).len()];
                for (k, &r) in rows.iter().enumerate() {
                    gi[r * row_len..(r + 1) * row_len]
                        .iter_mut()
                        .zip(&g[k * row_len..(k + 1) * row_len])
                        .for_each(|(d, s)| *d += s);
                }
                self.accumulate(grads, *input, gi);
            }
            &Op::MatMul(a, b) => {
                let [m, k] = [self.shape(a)[0], self.shape(a)[1]];
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.data(b), true, 0.0, &mut ga);
                    self.accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.data(a), true, g, false, 0.0, &mut gb);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                self.accumulate(grads, a, transpose(n, m, g));
            }
            &Op::Linear { input, weight, bias } => {
                let (batch, din) = (self.shape(input)[0], self.shape(input)[1]);
                let dout = self.shape(weight)[0];
                if self.wants(input) {
                    let mut gx = vec![0.0; batch * din];
                    kernels::gemm(batch, dout, din, g, false, self.data(weight), false, 0.0, &mut gx);
                    self.accumulate(grads, input, gx);
                }
                if self.wants(weight) {
                    let mut gw = vec![0.0; dout * din];
                    kernels::gemm(dout, batch, din, g, true, self.data(input), false, 0.0, &mut gw);
                    self.accumulate(grads, weight, gw);
                }
                if self.wants(bias) {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, bias, gb);
                }
            }
            &Op::Conv2d { input, kernel, geometry } => {
                let batch = self.shape(input)[0];
                let cout = self.shape(kernel)[0];
                if self.wants(input) {
                    let gx = kernels::conv2d_grad_input(g, batch, &geometry, self.data(kernel), cout);
                    self.accumulate(grads, input, gx);
                }
                if self.wants(kernel) {
                    let gk = kernels::conv2d_grad_kernel(g, self.data(input), batch, &geometry, cout);
                    self.accumulate(grads, kernel, gk);
                }
            }
            &Op::ConvTranspose2d { input, kernel, geometry } => {
                let batch = self.shape(input)[0];
                let cin = self.shape(input)[1];
                if self.wants(input) {
                    let gx = kernels::conv_transpose2d_grad_input(g, batch, cin, &geometry, self.data(kernel));
                    self.accumulate(grads, input, gx);
                }
                if self.wants(kernel) {
                    let gk = kernels::conv_transpose2d_grad_kernel(g, self.data(input), batch, cin, &geometry);
                    self.accumulate(grads, kernel, gk);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                self.accumulate(grads, *input, gi);
            }
            &Op::SpatialMean(a) => {
                let plane = plane_len(self.shape(a));
                let inv = 1.0 / plane as f64;
                let gi = (0..self.value(a).len()).map(|i| g[i / plane] * inv).collect();
                self.accumulate(grads, a, gi);
            }
            &Op::SpatialVar(a) => {
                let plane = plane_len(self.shape(a));
                let mut gi = Vec::with_capacity(self.value(a).len());
                for (p, x) in self.data(a).chunks(plane).enumerate() {
                    let (mean, _) = plane_stats(x);
                    let c = 2.0 * g[p] / plane as f64;
                    gi.extend(x.iter().map(|v| c * (v - mean)));
                }
                self.accumulate(grads, a, gi);
            }
            Op::L2NormalizeRows { input, norms } => {
                let d = self.shape(*input)[1].max(1);
                let mut gi = Vec::with_capacity(y.len());
                for ((yr, gr), n) in y.chunks(d).zip(g.chunks(d)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gi.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / n));
                }
                self.accumulate(grads, *input, gi);
            }
            &Op::LogSoftmax(a) => {
                let c = self.shape(a)[1];
                let mut gi = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    gi.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * total));
                }
                self.accumulate(grads, a, gi);
            }
            Op::PickPerRow { input, cols } => {
                let c = self.shape(*input)[1];
                let mut gi = vec![0.0; self.value(*input).len()];
                for (i, &j) in cols.iter().enumerate() {
                    gi[i * c + j] += g[i];
                }
                self.accumulate(grads, *input, gi);
            }
            &Op::PairwiseSqDists(a, b) => {
                let (n, d) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[0];
                let (xa, xb) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            for k in 0..d {
                                ga[i * d + k] += gij * (xa[i * d + k] - xb[j * d + k]);
                            }
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            for k in 0..d {
                                gb[j * d + k] -= gij * (xa[i * d + k] - xb[j * d + k]);
                            }
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn plane_len(shape: &[usize]) -> usize {
    shape[2] * shape[3]
}

/// Mean and population variance of one spatial plane.
fn plane_stats(p: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[m, n] => Ok((m, n)),
        _ => Err(L2dError::shape(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(L2dError::shape(op, format!("expected 4 dimensions, got shape {shape:?}"))),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every element of the broadcast result, the flat index of its source element.
fn broadcast_index_map(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() != to.len() || from.iter().zip(to).any(|(&f, &t)| f != t && f != 1) {
        return Err(L2dError::shape("broadcast_to", format!("cannot broadcast {from:?} to {to:?}")));
    }
    let src_strides: Vec<usize> =
        strides(from).into_iter().zip(from).map(|(s, &f)| if f == 1 { 0 } else { s }).collect();
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < to[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(map)
}

/// Output shape after summing out `axes`, and for each input element its output index.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(L2dError::shape("sum_axes", format!("axes {axes:?} out of range for {shape:?}")));
    }
    let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let mut kept_shape = shape.to_vec();
    for &a in axes {
        kept_shape[a] = 1;
    }
    // Broadcasting the kept-dims view back over the input gives exactly the reduction map.
    let map = broadcast_index_map(&kept_shape, shape)?;
    Ok((out_shape, map))
}
