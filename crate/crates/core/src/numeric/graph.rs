//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed primitive in execution order. Inputs of
//! an operation always precede it on the tape, so a single reverse sweep over
//! the node list visits each operation exactly once in a valid order.
//!
//! Leaf gradients accumulate across [`Graph::backward`] calls until
//! [`Graph::zero_grad`] is called. Intermediate gradients are rebuilt on every
//! sweep.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Architectural region an operation was recorded under. Used to audit which
/// parts of a model a forward pass touched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Scope {
    #[default]
    Other,
    Text,
    Image,
    Fusion,
    Attention,
    Classifier,
    Loss,
}

/// Deliberate backward-pass corruption, used to prove the gradient checker
/// detects broken kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvKernelGradSignFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel exponential moving averages maintained by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    TransposeLast2 { x: Var },
    Reshape { x: Var },
    AddRowBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    AdaptiveAvgPool { x: Var },
    GlobalAvgPool { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::TransposeLast2 { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Concat { .. } => "concat",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
    scope: Scope,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scope: Scope,
    check_finite: bool,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every operation fail with [`Error::Numeric`] when it produces a
    /// NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Sets the scope for subsequently recorded nodes and returns the old one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes (leaves and operations) recorded under `scope`.
    pub fn count_in_scope(&self, scope: Scope) -> usize {
        self.nodes.iter().filter(|n| n.scope == scope).count()
    }

    /// Names of the recorded operations, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Accumulated gradient of a leaf, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            scope: self.scope,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// `[.., k] × [k, n] -> [.., n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).len() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; rows * n];
        kernels::gemm(false, false, rows, k, n, 1.0, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// `[B, m, k] × [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err!("batch_matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(false, false, m, k, n, 1.0, &da[i * m * k..], &db[i * k * n..], 0.0, &mut out[i * m * n..]);
        }
        self.push(Tensor::new(&[batch, m, n], out)?, Op::BatchMatMul { a, b }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(dim_err!("transpose needs rank >= 2, got {:?}", s));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(x).len() / (m * n).max(1);
        let data = kernels::transpose_stack(self.value(x).data(), batch, m, n);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        self.push(Tensor::new(&shape, data)?, Op::TransposeLast2 { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(dim_err!("add_row_bias: bias {:?} does not match rows of {:?}", sb, sx));
        }
        let n = sb[0];
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_mut(n.max(1)) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        self.push(value, Op::AddRowBias { x, bias }, &[x, bias])
    }

    /// Adds `bias[C]` along axis 1 of `x[N, C, ..]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.len() < 2 || sx[1] != sb[0] {
            return Err(dim_err!("add_channel_bias: bias {:?} does not match channels of {:?}", sb, sx));
        }
        let c = sb[0];
        let plane: usize = sx[2..].iter().product();
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        for (i, chunk) in value.data_mut().chunks_mut(plane.max(1)).enumerate() {
            let bb = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        self.push(value, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    // ── Convolution and normalization ───────────────────────────────────

    /// Cross-correlation with zero padding.
    ///
    /// `input` is `[C_in, H, W]` or `[N, C_in, H, W]`; `kernel` is
    /// `[C_out, C_in, kh, kw]`. The output keeps the input's rank.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let batched = match si.len() {
            3 => false,
            4 => true,
            _ => return Err(dim_err!("conv2d: input must be [C,H,W] or [N,C,H,W], got {:?}", si)),
        };
        let (batch, c_in, h, w) = if batched {
            (si[0], si[1], si[2], si[3])
        } else {
            (1, si[0], si[1], si[2])
        };
        if sk.len() != 4 || sk[1] != c_in {
            return Err(dim_err!("conv2d: kernel {:?} incompatible with input {:?}", sk, si));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be positive".into()));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(dim_err!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0; c_out * geom.cols()];
        kernels::gemm(false, false, c_out, geom.patch_len(), geom.cols(), 1.0, self.value(kernel).data(), &cols, 0.0, &mut out);
        let out = kernels::swap_outer(&out, c_out, batch, geom.out_plane());
        let shape = if batched {
            vec![batch, c_out, geom.out_h, geom.out_w]
        } else {
            vec![c_out, geom.out_h, geom.out_w]
        };
        self.push(Tensor::new(&shape, out)?, Op::Conv2d { input, kernel, geom, cols }, &[input, kernel])
    }

    /// Per-channel normalization of `[N, C, H, W]` with learned affine.
    ///
    /// Train mode normalizes with the batch statistics (biased variance) and
    /// folds them into `stats` with momentum [`BN_MOMENTUM`], using the
    /// unbiased variance for the running estimate. Eval mode normalizes with
    /// `stats` and leaves them untouched.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("batchnorm2d: expected [N,C,H,W], got {:?}", s));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(dim_err!("batchnorm2d: affine/statistics do not have {} channels", c));
        }
        let m = n * plane;
        let train = mode == BnMode::Train;
        if train && m < 2 {
            return Err(Error::Contract(format!(
                "batchnorm2d: degenerate batch, {} value(s) per channel in train mode",
                m
            )));
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let channel = || (0..n).flat_map(move |i| (0..plane).map(move |p| (i * c + ch) * plane + p));
            let (mean, var) = if train {
                let mean = channel().map(|i| xs[i]).sum::<f64>() / m as f64;
                let var = channel().map(|i| (xs[i] - mean).powi(2)).sum::<f64>() / m as f64;
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var * m as f64 / (m - 1) as f64;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let istd = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std[ch] = istd;
            for i in channel() {
                xhat[i] = (xs[i] - mean) * istd;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / plane) % c;
                g[ch] * v + b[ch]
            })
            .collect();
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train };
        self.push(Tensor::new(&s, out)?, op, &[x, gamma, beta])
    }

    // ── Elementwise and reductions ──────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let width = *v.shape().last().ok_or_else(|| dim_err!("softmax_rows on a scalar"))?;
        let mut out = v.data().to_vec();
        if width > 0 {
            for row in out.chunks_mut(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    total += *e;
                }
                row.iter_mut().for_each(|e| *e /= total);
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push(value, Op::SoftmaxRows { x }, &[x])
    }

    /// Concatenates tensors along `axis`; every other axis must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, first));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(dim_err!("concat: rank mismatch {:?} vs {:?}", first, s));
            }
            for (ax, (&a, &b)) in first.iter().zip(s).enumerate() {
                if ax != axis && a != b {
                    return Err(dim_err!(
                        "concat: axis {} differs ({} vs {}) between {:?} and {:?}",
                        ax,
                        a,
                        b,
                        first,
                        s
                    ));
                }
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(&shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Concatenates along the channel axis of `[C, H, W]` or `[N, C, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || !(sa.len() == 3 || sa.len() == 4) {
            return Err(dim_err!("concat_channels: ranks of {:?} and {:?} unsupported", sa, sb));
        }
        let r = sa.len();
        let names = ["H", "W"];
        for (i, name) in names.iter().enumerate() {
            let ax = r - 2 + i;
            if sa[ax] != sb[ax] {
                return Err(dim_err!(
                    "concat_channels: {} differs ({} vs {}) between {:?} and {:?}",
                    name,
                    sa[ax],
                    sb[ax],
                    sa,
                    sb
                ));
            }
        }
        if r == 4 && sa[0] != sb[0] {
            return Err(dim_err!("concat_channels: batch differs between {:?} and {:?}", sa, sb));
        }
        self.concat(&[a, b], r - 3)
    }

    /// Average pooling of `[N, C, H, W]` (or `[C, H, W]`) onto a fixed
    /// `out_h × out_w` grid. Bin `i` spans `floor(i·H/out)..ceil((i+1)·H/out)`,
    /// so grids larger than the input replicate cells.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || out_h == 0 || out_w == 0 {
            return Err(dim_err!("adaptive_avg_pool2d: bad input {:?} or grid {}x{}", s, out_h, out_w));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h == 0 || w == 0 {
            return Err(dim_err!("adaptive_avg_pool2d: empty {}x{} input", h, w));
        }
        let planes = self.value(x).len() / (h * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let plane = &src[p * h * w..][..h * w];
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out[(p * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        self.push(Tensor::new(&shape, out)?, Op::AdaptiveAvgPool { x }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("global_avg_pool: expected [N,C,H,W], got {:?}", s));
        }
        let plane = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(plane.max(1))
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(Tensor::new(&s[..2], data)?, Op::GlobalAvgPool { x }, &[x])
    }

    /// Row lookup into `table[V, D]`; output shape is `ids_shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(dim_err!("embedding: table must be [V,D], got {:?}", st));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err!("embedding: {} ids do not fill shape {:?}", ids.len(), ids_shape));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("embedding: id {} outside vocabulary of {}", bad, vocab)));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        self.push(Tensor::new(&shape, data)?, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(dim_err!("cross_entropy: logits {:?} vs {} labels", s, labels.len()));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("cross_entropy: label {} with {} classes", bad, k)));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += log_z - row[label];
            row.iter_mut().for_each(|v| *v = (*v - log_z).exp());
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let m = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err!("mul: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|e| e * factor).collect())?;
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    // ── Reverse sweep ───────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink { nodes: &self.nodes, grads: &mut grads };
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::MatMul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (k, n) = (vb.shape()[0], vb.shape()[1]);
                    let rows = va.len() / k.max(1);
                    sink.add(*a, |da| kernels::gemm(false, true, rows, n, k, 1.0, &g, vb.data(), 1.0, da));
                    sink.add(*b, |db| kernels::gemm(true, false, k, rows, n, 1.0, va.data(), &g, 1.0, db));
                }
                Op::BatchMatMul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (batch, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                    sink.add(*a, |da| {
                        for i in 0..batch {
                            kernels::gemm(false, true, m, n, k, 1.0, &g[i * m * n..], &vb.data()[i * k * n..], 1.0, &mut da[i * m * k..]);
                        }
                    });
                    sink.add(*b, |db| {
                        for i in 0..batch {
                            kernels::gemm(true, false, k, m, n, 1.0, &va.data()[i * m * k..], &g[i * m * n..], 1.0, &mut db[i * k * n..]);
                        }
                    });
                }
                Op::TransposeLast2 { x } => {
                    let s = node.value.shape();
                    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = g.len() / (m * n).max(1);
                    let back = kernels::transpose_stack(&g, batch, m, n);
                    sink.add(*x, |dx| add_into(dx, &back));
                }
                Op::Reshape { x } => sink.add(*x, |dx| add_into(dx, &g)),
                Op::AddRowBias { x, bias } => {
                    sink.add(*x, |dx| add_into(dx, &g));
                    sink.add(*bias, |db| {
                        let n = db.len();
                        for row in g.chunks(n.max(1)) {
                            add_into(db, row);
                        }
                    });
                }
                Op::AddChannelBias { x, bias } => {
                    sink.add(*x, |dx| add_into(dx, &g));
                    let s = node.value.shape();
                    let plane: usize = s[2..].iter().product();
                    sink.add(*bias, |db| {
                        let c = db.len();
                        for (i, chunk) in g.chunks(plane.max(1)).enumerate() {
                            db[i % c] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::Conv2d { input, kernel, geom, cols } => {
                    let gp = kernels::swap_outer(&g, geom.batch, geom.c_out, geom.out_plane());
                    let flip = self.fault == Some(Fault::ConvKernelGradSignFlip);
                    sink.add(*kernel, |dk| {
                        let alpha = if flip { -1.0 } else { 1.0 };
                        kernels::gemm(false, true, geom.c_out, geom.cols(), geom.patch_len(), alpha, &gp, cols, 1.0, dk);
                    });
                    let w = &self.nodes[kernel.0].value;
                    sink.add(*input, |dx| {
                        let mut dcols = vec![0.0; geom.patch_len() * geom.cols()];
                        kernels::gemm(true, false, geom.patch_len(), geom.c_out, geom.cols(), 1.0, w.data(), &gp, 0.0, &mut dcols);
                        kernels::col2im_add(&dcols, geom, dx);
                    });
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let s = node.value.shape();
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let m = (n * plane) as f64;
                    let gam = self.nodes[gamma.0].value.data();
                    let chan = |ch: usize| (0..n).flat_map(move |i| (0..plane).map(move |p| (i * c + ch) * plane + p));
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for ch in 0..c {
                        for i in chan(ch) {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                    sink.add(*gamma, |dg| add_into(dg, &sum_dy_xhat));
                    sink.add(*beta, |db| add_into(db, &sum_dy));
                    sink.add(*x, |dx| {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for i in chan(ch) {
                                dx[i] += if *train {
                                    scale * (g[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    });
                }
                Op::Relu { x } => {
                    let xs = self.nodes[x.0].value.data();
                    sink.add(*x, |dx| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(xs) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::SoftmaxRows { x } => {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    sink.add(*x, |dx| {
                        if width == 0 {
                            return;
                        }
                        for ((drow, grow), yrow) in dx.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let s = node.value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let total = s[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let block = self.nodes[p.0].value.shape()[*axis] * inner;
                        sink.add(*p, |dp| {
                            for o in 0..outer {
                                add_into(&mut dp[o * block..(o + 1) * block], &g[o * total + offset..][..block]);
                            }
                        });
                        offset += block;
                    }
                }
                Op::AdaptiveAvgPool { x } => {
                    let si = self.nodes[x.0].value.shape();
                    let so = node.value.shape();
                    let (h, w) = (si[si.len() - 2], si[si.len() - 1]);
                    let (oh, ow) = (so[so.len() - 2], so[so.len() - 1]);
                    sink.add(*x, |dx| {
                        let planes = dx.len() / (h * w);
                        for p in 0..planes {
                            for oy in 0..oh {
                                let (y0, y1) = pool_bin(oy, h, oh);
                                for ox in 0..ow {
                                    let (x0, x1) = pool_bin(ox, w, ow);
                                    let share = g[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                                    for y in y0..y1 {
                                        for e in &mut dx[p * h * w + y * w + x0..p * h * w + y * w + x1] {
                                            *e += share;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::GlobalAvgPool { x } => {
                    let si = self.nodes[x.0].value.shape();
                    let plane = si[2] * si[3];
                    sink.add(*x, |dx| {
                        for (chunk, gv) in dx.chunks_mut(plane.max(1)).zip(&g) {
                            let share = gv / plane as f64;
                            chunk.iter_mut().for_each(|e| *e += share);
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = self.nodes[table.0].value.shape()[1];
                    sink.add(*table, |dt| {
                        for (pos, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * d..(id + 1) * d], &g[pos * d..(pos + 1) * d]);
                        }
                    });
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    sink.add(*logits, |dl| {
                        for (i, &label) in labels.iter().enumerate() {
                            for j in 0..k {
                                let target = if j == label { 1.0 } else { 0.0 };
                                dl[i * k + j] += scale * (probs[i * k + j] - target);
                            }
                        }
                    });
                }
                Op::Sum { x } => sink.add(*x, |dx| dx.iter_mut().for_each(|e| *e += g[0])),
                Op::Mean { x } => {
                    sink.add(*x, |dx| {
                        let share = g[0] / dx.len() as f64;
                        dx.iter_mut().for_each(|e| *e += share);
                    });
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    sink.add(*a, |da| {
                        for ((d, gv), bv) in da.iter_mut().zip(&g).zip(vb) {
                            *d += gv * bv;
                        }
                    });
                    sink.add(*b, |db| {
                        for ((d, gv), av) in db.iter_mut().zip(&g).zip(va) {
                            *d += gv * av;
                        }
                    });
                }
                Op::Scale { x, factor } => {
                    sink.add(*x, |dx| {
                        for (d, gv) in dx.iter_mut().zip(&g) {
                            *d += gv * factor;
                        }
                    });
                }
            }
        }

        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => add_into(acc.data_mut(), &g),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }
}

/// Routes upstream gradient into input buffers, skipping inputs that do not
/// require gradients.
struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Sink<'_> {
    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn pool_bin(i: usize, size: usize, bins: usize) -> (usize, usize) {
    let start = i * size / bins;
    let end = ((i + 1) * size).div_ceil(bins);
    (start, end)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
    }

    #[test]
    fn conv_trivial_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[1, 3, 3], 2.0));

        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::Dimension(_))));
        assert!(g.conv2d(x, k, 1, 2).is_ok());
    }

    #[test]
    fn batchnorm_constant_channel_and_affine_collapse() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 2, 2], 3.5));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let y = g.batchnorm2d(x, gamma, beta, &mut stats, BnMode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64 * 1.7 - 3.0));
        let gamma = g.constant(Tensor::zeros(&[1]));
        let beta = g.constant(Tensor::full(&[1], 5.0));
        let y = g.batchnorm2d(x, gamma, beta, &mut stats, BnMode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_degenerate_batch_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            g.batchnorm2d(x, gamma, beta, &mut stats, BnMode::Train),
            Err(Error::Contract(_))
        ));
        assert!(g.batchnorm2d(x, gamma, beta, &mut stats, BnMode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        g.batchnorm2d(x, gamma, beta, &mut stats, BnMode::Train).unwrap();
        // batch mean 2, unbiased variance 2
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn relu_values_and_masked_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[4], -0.5));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[1, 3], &[1000.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
    }

    #[test]
    fn concat_channels_order_and_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 3, 3], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[5, 3, 3]);
        assert!(g.value(c).data()[..18].iter().all(|&v| v == 1.0));
        assert!(g.value(c).data()[18..].iter().all(|&v| v == 2.0));

        let empty = g.constant(Tensor::zeros(&[0, 3, 3]));
        let same = g.concat_channels(a, empty).unwrap();
        assert_eq!(g.value(same), g.value(a));

        let wide = g.constant(Tensor::zeros(&[1, 3, 4]));
        let msg = g.concat_channels(a, wide).unwrap_err().to_string();
        assert!(msg.contains("W differs"), "{msg}");
        let tall = g.constant(Tensor::zeros(&[1, 2, 3]));
        let msg = g.concat_channels(a, tall).unwrap_err().to_string();
        assert!(msg.contains("H differs"), "{msg}");
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.3, -2.0, 7.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(3.0));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
        assert_eq!(g.grad(y).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn check_finite_mode_flags_overflow() {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.constant(Tensor::full(&[2], 1e308));
        assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn embedding_scatter_adds_repeated_ids() {
        let mut g = Graph::new();
        let table = g.param(Tensor::from_fn(&[3, 2], |i| i as f64));
        let e = g.embedding(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(g.value(e).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = g.sum(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.embedding(table, &[3], &[1]).is_err());
    }

    #[test]
    fn adaptive_pool_bins_cover_odd_sizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64));
        let y = g.adaptive_avg_pool2d(x, 2, 2).unwrap();
        // bins over 0..3 and 2..5 in each axis
        let want = [6.0, 8.0, 16.0, 18.0];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scope_counts() {
        let mut g = Graph::new();
        g.set_scope(Scope::Text);
        let a = g.constant(Tensor::zeros(&[2]));
        g.set_scope(Scope::Image);
        g.relu(a).unwrap();
        assert_eq!(g.count_in_scope(Scope::Text), 1);
        assert_eq!(g.count_in_scope(Scope::Image), 1);
        assert_eq!(g.op_names(), ["leaf", "relu"]);
    }
}
