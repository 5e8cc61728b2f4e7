//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a new
//! node holding its forward value and a record of how it was produced, so
//! node indices are already a topological order and [`Graph::backward`] is a
//! single reverse sweep. Graphs are cheap to build and are meant to be thrown
//! away after each optimisation step.
//!
//! ```
//! use orthomap::tensor::{Array, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.param(Array::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use super::array::Array;
use super::kernels::{col2im, gemm, im2col, sigmoid, softplus, ConvGeom};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Broadcast(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    ChannelsLast(Var),
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SigmoidFocal {
        logits: Var,
        targets: Array,
        alpha: f64,
        gamma: f64,
        normalizer: f64,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Array,
    },
    BceLogits {
        logits: Var,
        targets: Array,
    },
    Giou {
        pred: Var,
        gt: Array,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Broadcast(..) => "broadcast",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::AddRowBias(..) => "add_row_bias",
            Op::GroupNorm { .. } => "group_norm",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::ChannelsLast(..) => "channels_last",
            Op::SelectRows { .. } => "select_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SigmoidFocal { .. } => "sigmoid_focal_loss",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::Giou { .. } => "giou_loss",
        }
    }
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: accumulates gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// Frozen leaf: never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by [`Graph::backward`]. `None` for frozen nodes
    /// and for nodes not reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape().to_vec(), data).expect("shapes checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Repeats a one-element node over `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::contract("broadcast: source must hold one value"));
        }
        let out = Array::full(shape.to_vec(), self.value(s).item());
        self.push(out, Op::Broadcast(s), &[s])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was
    /// already inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::contract("mean of an empty array"));
        }
        let out = Array::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Alias for reshaping to one dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return Err(Error::contract("transpose expects a 2-D node"));
        }
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::contract(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation of `input` (`[in, h, w]` or `[batch, in, h, w]`)
    /// with `kernel` laid out as `[out, k, k, in]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let (batch, in_ch, height, width, batched) = match ishape[..] {
            [c, h, w] => (1, c, h, w, false),
            [b, c, h, w] => (b, c, h, w, true),
            _ => return Err(Error::contract(format!("conv2d: input shape {ishape:?} is not 3-D or 4-D"))),
        };
        let [out_ch, kh, kw, k_in] = kshape[..] else {
            return Err(Error::contract(format!("conv2d: kernel shape {kshape:?} is not 4-D")));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::contract(format!("conv2d: kernel must be square and odd, got {kh}x{kw}")));
        }
        if k_in != in_ch {
            return Err(Error::contract(format!(
                "conv2d: kernel expects {k_in} input channels, input has {in_ch}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be positive"));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::contract("conv2d: kernel larger than padded input"));
        }
        let out_h = (height + 2 * padding - kh) / stride + 1;
        let out_w = (width + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            ksize: kh,
            stride,
            padding,
            out_h,
            out_w,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let (patch, sites) = (geom.patch_len(), geom.sites());
        let mut tmp = vec![0.0; out_ch * sites];
        gemm(
            out_ch,
            patch,
            sites,
            self.value(kernel).data(),
            (patch, 1),
            &cols,
            (sites, 1),
            0.0,
            &mut tmp,
            (sites, 1),
        );
        let data = sites_to_batch_major(&tmp, &geom);
        let shape = if batched {
            vec![batch, out_ch, out_h, out_w]
        } else {
            vec![out_ch, out_h, out_w]
        };
        let op = Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        };
        self.push(Array::new(shape, data)?, op, &[input, kernel])
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[c, h, w]` or
    /// `[b, c, h, w]` node.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (channels, plane) = match shape[..] {
            [c, h, w] | [_, c, h, w] => (c, h * w),
            _ => return Err(Error::contract("add_channel_bias expects a 3-D or 4-D node")),
        };
        if self.shape(bias) != [channels] {
            return Err(Error::contract(format!(
                "add_channel_bias: bias shape {:?} does not match {channels} channels",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        self.push(out, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// Adds `bias` to every row of a `[m, c]` node.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::contract(format!(
                "add_row_bias: cannot add {:?} to rows of {shape:?}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(shape[1]) {
            row.iter_mut().zip(&b).for_each(|(v, c)| *v += c);
        }
        self.push(out, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Group normalisation of a `[c, h, w]` or `[b, c, h, w]` node followed
    /// by a per-channel affine map `gamma * x + beta`. Each image's channels
    /// are split into `groups` equal runs normalised together.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, channels, plane) = match shape[..] {
            [c, h, w] => (1, c, h * w),
            [b, c, h, w] => (b, c, h * w),
            _ => return Err(Error::contract("group_norm expects a 3-D or 4-D node")),
        };
        if groups == 0 || channels % groups != 0 {
            return Err(Error::contract(format!(
                "group_norm: {groups} groups do not divide {channels} channels"
            )));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::contract("group_norm: gamma and beta must be [channels]"));
        }
        if eps <= 0.0 {
            return Err(Error::contract("group_norm: eps must be positive"));
        }
        let span = channels / groups * plane;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(batch * groups);
        for (chunk, out) in src.chunks(span).zip(xhat.chunks_mut(span)) {
            let mean = chunk.iter().sum::<f64>() / span as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o = (v - mean) * inv);
            inv_std.push(inv);
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let c = i % channels;
            chunk.iter_mut().for_each(|v| *v = gm[c] * *v + bt[c]);
        }
        let op = Op::GroupNorm {
            input: x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        };
        self.push(Array::new(shape, out)?, op, &[x, gamma, beta])
    }

    /// 2x2 max pooling with stride 2 over the last two axes.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::contract("max_pool2 needs at least 2 axes"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::contract("max_pool2: input smaller than the window"));
        }
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut oshape = shape[..shape.len() - 2].to_vec();
        oshape.extend([oh, ow]);
        self.push(Array::new(oshape, out)?, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// Mean over the last two axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::contract("global_avg_pool expects [c, h, w] or [b, c, h, w]"));
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let oshape = shape[..shape.len() - 2].to_vec();
        self.push(Array::new(oshape, out)?, Op::GlobalAvgPool(x), &[x])
    }

    /// Divides each vector along the last axis by `max(||v||_2, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("l2_normalize: eps must be positive"));
        }
        let v = self.value(x);
        let len = *v.shape().last().ok_or_else(|| Error::contract("l2_normalize of a scalar"))?;
        if len == 0 {
            return Err(Error::contract("l2_normalize of an empty axis"));
        }
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.len() / len);
        for row in out.data_mut().chunks_mut(len) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { input: x, norms, eps }, &[x])
    }

    /// `[c, h, w] -> [h*w, c]` and `[b, c, h, w] -> [b*h*w, c]`: one row per
    /// spatial location.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (b, c, plane) = match shape[..] {
            [c, h, w] => (1, c, h * w),
            [b, c, h, w] => (b, c, h * w),
            _ => return Err(Error::contract("channels_last expects a 3-D or 4-D node")),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..plane {
                    out[(bi * plane + p) * c + ci] = src[(bi * c + ci) * plane + p];
                }
            }
        }
        self.push(Array::new(vec![b * plane, c], out)?, Op::ChannelsLast(x), &[x])
    }

    /// Gathers slices along the first axis (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::contract("select_rows of a scalar"));
        }
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::contract(format!("select_rows: row {bad} out of {}", shape[0])));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut oshape = shape.clone();
        oshape[0] = rows.len();
        let op = Op::SelectRows {
            input: x,
            rows: rows.to_vec(),
        };
        self.push(Array::new(oshape, out)?, op, &[x])
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(*first).is_empty() {
            return Err(Error::contract("concat_rows of scalars"));
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::contract("concat_rows: trailing shapes differ"));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Array::new(shape, out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Sigmoid focal loss over `[m, c]` logits, summed and divided by
    /// `normalizer`. Targets are 0/1 per element.
    pub fn sigmoid_focal_loss(
        &mut self,
        logits: Var,
        targets: &Array,
        alpha: f64,
        gamma: f64,
        normalizer: f64,
    ) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::contract(format!(
                "focal loss: logits {:?} vs targets {:?}",
                self.shape(logits),
                targets.shape()
            )));
        }
        if normalizer <= 0.0 {
            return Err(Error::contract("focal loss: normalizer must be positive"));
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| focal_element(x, t, alpha, gamma).0)
            .sum();
        let op = Op::SigmoidFocal {
            logits,
            targets: targets.clone(),
            alpha,
            gamma,
            normalizer,
        };
        self.push(Array::scalar(total / normalizer), op, &[logits])
    }

    /// Mean negative log-likelihood of `labels` under a row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range 0..{k}")));
        }
        let mut probs = self.value(logits).clone();
        let mut total = 0.0;
        for (row, &label) in probs.data_mut().chunks_mut(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_z = m + z.ln();
            total += log_z - row[label];
            row.iter_mut().for_each(|v| *v = (*v - log_z).exp());
        }
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Array::scalar(total / labels.len() as f64), op, &[logits])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Array) -> Result<Var> {
        if self.value(logits).len() != targets.len() || targets.is_empty() {
            return Err(Error::contract("bce_with_logits: size mismatch"));
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum();
        let op = Op::BceLogits {
            logits,
            targets: targets.clone(),
        };
        self.push(Array::scalar(total / targets.len() as f64), op, &[logits])
    }

    /// Mean `1 - GIoU` between `[m, 4]` predicted boxes and fixed targets.
    pub fn giou_loss(&mut self, pred: Var, gt: &Array) -> Result<Var> {
        let shape = self.shape(pred);
        if shape.len() != 2 || shape[1] != 4 || gt.shape() != shape || shape[0] == 0 {
            return Err(Error::contract(format!(
                "giou_loss: pred {shape:?} vs gt {:?}",
                gt.shape()
            )));
        }
        let m = shape[0];
        let total: f64 = self
            .value(pred)
            .rows()
            .zip(gt.rows())
            .map(|(p, g)| giou_terms(p, g).0)
            .sum();
        let op = Op::Giou {
            pred,
            gt: gt.clone(),
        };
        self.push(Array::scalar(total / m as f64), op, &[pred])
    }

    /// Propagates d`loss`/d`node` to every trainable node reachable from the
    /// scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match (&node.op, node.grad.as_mut()) {
                (Op::Leaf, Some(acc)) => acc.add_assign(&g),
                _ => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut send = |v: Var, contrib: Array| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Array::new(val(v).shape().to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                send(*a, like(*a, ga));
                send(*b, like(*b, gb));
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Broadcast(s) => send(*s, like(*s, vec![g.sum()])),
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*a, like(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                send(*a, like(*a, d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                send(*a, like(*a, d));
            }
            Op::Log(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                send(*a, like(*a, d));
            }
            Op::Abs(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x.signum()).collect();
                send(*a, like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if (*lo..=*hi).contains(x) { *g } else { 0.0 })
                    .collect();
                send(*a, like(*a, d));
            }
            Op::Sum(a) => send(*a, Array::full(val(*a).shape().to_vec(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                send(*a, Array::full(val(*a).shape().to_vec(), g.item() / n));
            }
            Op::Reshape(a) => send(*a, like(*a, gd.to_vec())),
            Op::Transpose(a) => send(*a, g.transposed()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if nodes[a.0].requires_grad {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, (n, 1), vb.data(), (1, n), 0.0, &mut da, (k, 1));
                    send(*a, like(*a, da));
                }
                if nodes[b.0].requires_grad {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), gd, (n, 1), 0.0, &mut db, (n, 1));
                    send(*b, like(*b, db));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (patch, sites) = (geom.patch_len(), geom.sites());
                let gtmp = batch_major_to_sites(gd, geom);
                if nodes[kernel.0].requires_grad {
                    let mut dk = vec![0.0; geom.out_ch * patch];
                    gemm(geom.out_ch, sites, patch, &gtmp, (sites, 1), cols, (1, sites), 0.0, &mut dk, (patch, 1));
                    send(*kernel, like(*kernel, dk));
                }
                if nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; patch * sites];
                    gemm(
                        patch,
                        geom.out_ch,
                        sites,
                        val(*kernel).data(),
                        (1, patch),
                        &gtmp,
                        (sites, 1),
                        0.0,
                        &mut dcols,
                        (sites, 1),
                    );
                    send(*input, like(*input, col2im(&dcols, geom)));
                }
            }
            Op::AddChannelBias(x, b) => {
                send(*x, g.clone());
                let channels = val(*b).len();
                let shape = val(*x).shape();
                let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
                let mut db = vec![0.0; channels];
                for (i, chunk) in gd.chunks(plane).enumerate() {
                    db[i % channels] += chunk.iter().sum::<f64>();
                }
                send(*b, like(*b, db));
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let channels = val(*gamma).len();
                let plane = xhat.len() / inv_std.len() / (channels / groups);
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut dxhat = vec![0.0; xhat.len()];
                for (i, ((gc, xc), dc)) in gd
                    .chunks(plane)
                    .zip(xhat.chunks(plane))
                    .zip(dxhat.chunks_mut(plane))
                    .enumerate()
                {
                    let c = i % channels;
                    for ((g, x), d) in gc.iter().zip(xc).zip(dc.iter_mut()) {
                        dgamma[c] += g * x;
                        dbeta[c] += g;
                        *d = g * gm[c];
                    }
                }
                let span = xhat.len() / inv_std.len();
                let mut dx = vec![0.0; xhat.len()];
                for (k, inv) in inv_std.iter().enumerate() {
                    let r = k * span..(k + 1) * span;
                    let (dh, xh) = (&dxhat[r.clone()], &xhat[r.clone()]);
                    let m1 = dh.iter().sum::<f64>() / span as f64;
                    let m2 = dh.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / span as f64;
                    for ((o, d), x) in dx[r].iter_mut().zip(dh).zip(xh) {
                        *o = inv * (d - m1 - x * m2);
                    }
                }
                send(*input, like(*input, dx));
                send(*gamma, like(*gamma, dgamma));
                send(*beta, like(*beta, dbeta));
            }
            Op::AddRowBias(x, b) => {
                send(*x, g.clone());
                let c = val(*b).len();
                let mut db = vec![0.0; c];
                for row in gd.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*b, like(*b, db));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; val(*input).len()];
                for (&src, gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                send(*input, like(*input, d));
            }
            Op::GlobalAvgPool(x) => {
                let shape = val(*x).shape();
                let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
                let mut d = Vec::with_capacity(val(*x).len());
                for gv in gd {
                    d.extend(std::iter::repeat(gv / plane as f64).take(plane));
                }
                send(*x, like(*x, d));
            }
            Op::L2Normalize { input, norms, eps } => {
                let len = *val(*input).shape().last().unwrap();
                let mut d = Vec::with_capacity(gd.len());
                for ((grow, yrow), &n) in gd.chunks(len).zip(node.value.data().chunks(len)).zip(norms) {
                    let clamped = n <= *eps;
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter().zip(yrow) {
                        d.push(if clamped { gv / n } else { (gv - yv * dot) / n });
                    }
                }
                send(*input, like(*input, d));
            }
            Op::ChannelsLast(x) => {
                let shape = val(*x).shape();
                let (b, c, plane) = match shape[..] {
                    [c, h, w] => (1, c, h * w),
                    [b, c, h, w] => (b, c, h * w),
                    _ => unreachable!(),
                };
                let mut d = vec![0.0; gd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..plane {
                            d[(bi * c + ci) * plane + p] = gd[(bi * plane + p) * c + ci];
                        }
                    }
                }
                send(*x, like(*x, d));
            }
            Op::SelectRows { input, rows } => {
                let shape = val(*input).shape();
                let width: usize = shape[1..].iter().product();
                let mut d = vec![0.0; val(*input).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        d[r * width + j] += gd[k * width + j];
                    }
                }
                send(*input, like(*input, d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    send(p, like(p, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
                normalizer,
            } => {
                let scale = g.item() / normalizer;
                let d = val(*logits)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| scale * focal_element(x, t, *alpha, *gamma).1)
                    .collect();
                send(*logits, like(*logits, d));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = probs.shape()[1];
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.data().to_vec();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, like(*logits, d));
            }
            Op::BceLogits { logits, targets } => {
                let scale = g.item() / targets.len() as f64;
                let d = val(*logits)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| scale * (sigmoid(x) - t))
                    .collect();
                send(*logits, like(*logits, d));
            }
            Op::Giou { pred, gt } => {
                let scale = g.item() / gt.shape()[0] as f64;
                let mut d = Vec::with_capacity(gt.len());
                for (p, q) in val(*pred).rows().zip(gt.rows()) {
                    d.extend(giou_terms(p, q).1.iter().map(|v| v * scale));
                }
                send(*pred, like(*pred, d));
            }
        }
    }
}

fn sites_to_batch_major(tmp: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.batch == 1 {
        return tmp.to_vec();
    }
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; tmp.len()];
    for co in 0..g.out_ch {
        for b in 0..g.batch {
            let src = &tmp[co * g.sites() + b * plane..co * g.sites() + (b + 1) * plane];
            out[(b * g.out_ch + co) * plane..(b * g.out_ch + co + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn batch_major_to_sites(data: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.batch == 1 {
        return data.to_vec();
    }
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; data.len()];
    for co in 0..g.out_ch {
        for b in 0..g.batch {
            out[co * g.sites() + b * plane..co * g.sites() + (b + 1) * plane]
                .copy_from_slice(&data[(b * g.out_ch + co) * plane..(b * g.out_ch + co + 1) * plane]);
        }
    }
    out
}

/// Focal loss of one element and its derivative with respect to the logit.
/// `t` interpolates between the negative (0) and positive (1) branches.
fn focal_element(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let q = 1.0 - p;
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let pos_loss = -alpha * q.powf(gamma) * log_p;
    let pos_grad = alpha * q.powf(gamma) * (gamma * p * log_p - q);
    let neg_loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
    let neg_grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * log_q);
    (
        t * pos_loss + (1.0 - t) * neg_loss,
        t * pos_grad + (1.0 - t) * neg_grad,
    )
}

/// `1 - GIoU` of one predicted box against one target box, with its gradient
/// with respect to the predicted corners. Boxes are `(x1, y1, x2, y2)`.
fn giou_terms(p: &[f64], g: &[f64]) -> (f64, [f64; 4]) {
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let area_p = pw * ph;
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);
    let iw_raw = p[2].min(g[2]) - p[0].max(g[0]);
    let ih_raw = p[3].min(g[3]) - p[1].max(g[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let ew = p[2].max(g[2]) - p[0].min(g[0]);
    let eh = p[3].max(g[3]) - p[1].min(g[1]);
    let enclose = ew * eh;
    let loss = 2.0 - inter / union - union / enclose;

    // loss as a function of (inter, area_p, enclose), with union = area_p + area_g - inter
    let dl_du = inter / (union * union) - 1.0 / enclose;
    let dl_dinter = -1.0 / union - dl_du;
    let dl_darea = dl_du;
    let dl_denc = union / (enclose * enclose);

    let darea = [-ph, -pw, ph, pw];
    let mut dinter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if p[0] >= g[0] {
            dinter[0] = -ih;
        }
        if p[1] >= g[1] {
            dinter[1] = -iw;
        }
        if p[2] <= g[2] {
            dinter[2] = ih;
        }
        if p[3] <= g[3] {
            dinter[3] = iw;
        }
    }
    let mut denc = [0.0; 4];
    if p[0] < g[0] {
        denc[0] = -eh;
    }
    if p[1] < g[1] {
        denc[1] = -ew;
    }
    if p[2] > g[2] {
        denc[2] = eh;
    }
    if p[3] > g[3] {
        denc[3] = ew;
    }
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = dl_dinter * dinter[k] + dl_darea * darea[k] + dl_denc * denc[k];
    }
    (loss, grad)
}
