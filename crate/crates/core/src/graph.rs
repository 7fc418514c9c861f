//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and [`Graph::backward`] is a single reverse sweep. A graph supports one
//! backward pass; running it again requires [`Graph::zero_grads`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{dim_err, geom_err, Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op identifiers, used for diagnostics, gradient-check reports and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    BroadcastMul,
    Sigmoid,
    Relu,
    Gelu,
    MatMul,
    Linear,
    LayerNorm,
    Softmax,
    Reshape,
    Permute,
    Conv2d,
    ChannelMax,
    ChannelAvg,
    MaxPool2,
    GlobalAvgPool,
    Concat,
    Sum,
    Mean,
    CrossEntropy,
}

impl OpKind {
    /// Every op with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 24] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::BroadcastMul,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Conv2d,
        OpKind::ChannelMax,
        OpKind::ChannelAvg,
        OpKind::MaxPool2,
        OpKind::GlobalAvgPool,
        OpKind::Concat,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::BroadcastMul => "broadcast_mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Conv2d => "conv2d",
            OpKind::ChannelMax => "channel_max",
            OpKind::ChannelAvg => "channel_avg",
            OpKind::MaxPool2 => "spatial_maxpool2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastMul(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ChannelMax { x: Var, argmax: Vec<usize> },
    ChannelAvg(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::BroadcastMul(..) => OpKind::BroadcastMul,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ChannelMax { .. } => OpKind::ChannelMax,
            Op::ChannelAvg(..) => OpKind::ChannelAvg,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::Concat(..) => OpKind::Concat,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::BroadcastMul(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::ChannelAvg(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Permute { x, .. } | Op::ChannelMax { x, .. } | Op::MaxPool2 { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    corrupted: Option<OpKind>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `data` (laid out as `shape`) into the order given by `axes`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    /// Test fixture: make the backward rule of `kind` emit wrong gradients
    /// (scaled by 1.5). Used to prove the gradient checker catches a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupted = Some(kind);
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_with(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_with(value, false)
    }

    /// A trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf_with(value, true)
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

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Move a leaf gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0)?.take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t * s);
        self.push(Op::Scale(x, s), v)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t + s);
        self.push(Op::AddScalar(x), v)
    }

    /// `x[C,H,W] ⊛ map[1,H,W]`: every channel scaled by the same spatial map.
    pub fn broadcast_mul(&mut self, x: Var, map: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x), self.shape(map));
        if xs.len() != 3 || ms.len() != 3 || ms[0] != 1 || xs[1..] != ms[1..] {
            return Err(dim_err(format!("broadcast_mul: cannot scale {xs:?} by {ms:?}")));
        }
        let hw = xs[1] * xs[2];
        let m = self.value(map).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .flat_map(|plane| plane.iter().zip(m).map(|(a, b)| a * b))
            .collect();
        let v = Tensor::from_parts(xs.to_vec(), data);
        self.push(Op::BroadcastMul(x, map), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| t.max(0.0));
        self.push(Op::Relu(x), v)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu);
        self.push(Op::Gelu(x), v)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m,k] x [k,n]`, or batched `[B,m,k] x [B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out))
    }

    /// `x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().expect("non-empty shape");
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(dim_err(format!("linear: weight {ws:?} does not accept input {xs:?}")));
        }
        let out_dim = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(dim_err(format!("linear: bias {:?} != [{out_dim}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(out_dim) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(rows, fan_in, out_dim, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        self.push(Op::Linear { x, w, b }, Tensor::from_parts(shape, out))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err(format!("layer_norm: affine params must be [{d}]")));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = self.value(x).numel() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).data().chunks_exact(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().enumerate().map(|(j, v)| (v - mu) * r * g[j] + bt[j]));
            mean.push(mu);
            rstd.push(r);
        }
        self.push(Op::LayerNorm { x, gamma, beta, mean, rstd }, Tensor::from_parts(xs, out))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks_exact(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - m).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        self.push(Op::Softmax(x), Tensor::from_parts(xs, out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), v)
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err(format!("permute: {axes:?} is not a permutation of {} axes", xs.len())));
        }
        let (shape, data) = permute_data(self.value(x).data(), &xs, axes);
        self.push(Op::Permute { x, axes: axes.to_vec() }, Tensor::from_parts(shape, data))
    }

    /// Swap the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err("transpose needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    // ---- convolution and pooling ------------------------------------------

    /// Direct cross-correlation of `x[C_in,H,W]` with `w[C_out,C_in,k,k]`, lowered to GEMM.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c_in, h, wd], [c_out, wc_in, k, k2]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(dim_err(format!("conv2d: expected [C,H,W] input and 4-D weight, got {xs:?}, {ws:?}")));
        };
        if c_in != wc_in {
            return Err(dim_err(format!("conv2d: input has {c_in} channels, weight expects {wc_in}")));
        }
        if k != k2 || !(*k == 1 || *k == 3) {
            return Err(geom_err(format!("conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}")));
        }
        if self.shape(b) != [*c_out] {
            return Err(dim_err(format!("conv2d: bias {:?} != [{c_out}]", self.shape(b))));
        }
        if stride == 0 {
            return Err(geom_err("conv2d: stride must be positive"));
        }
        let span = |n: usize| (n + 2 * pad).checked_sub(*k).map(|v| v / stride + 1);
        let (Some(h_out), Some(w_out)) = (span(*h), span(*wd)) else {
            return Err(geom_err(format!("conv2d: {k}x{k} kernel does not fit {h}x{wd} input with padding {pad}")));
        };
        let geom = ConvGeom { c_in: *c_in, h: *h, w: *wd, k: *k, stride, pad, h_out, w_out };
        let ncol = geom.col_cols();
        let mut out = Vec::with_capacity(c_out * ncol);
        for &bias in self.value(b).data() {
            out.extend(std::iter::repeat_n(bias, ncol));
        }
        let xd = self.value(x).data();
        let owned;
        let cols: &[f64] = if geom.is_pointwise() {
            xd
        } else {
            owned = im2col(xd, &geom);
            &owned
        };
        gemm(*c_out, geom.col_rows(), ncol, self.value(w).data(), false, cols, false, &mut out, 1.0);
        let v = Tensor::from_parts(vec![*c_out, h_out, w_out], out);
        self.push(Op::Conv2d { x, w, b, geom }, v)
    }

    fn chw(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(dim_err(format!("{what}: expected [C,H,W], got {s:?}"))),
        }
    }

    /// Per-pixel maximum over channels; ties go to the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "channel_max")?;
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = d[..hw].to_vec();
        let mut argmax = vec![0usize; hw];
        for ch in 1..c {
            for p in 0..hw {
                let v = d[ch * hw + p];
                if v > out[p] {
                    out[p] = v;
                    argmax[p] = ch;
                }
            }
        }
        self.push(Op::ChannelMax { x, argmax }, Tensor::from_parts(vec![1, h, w], out))
    }

    /// Per-pixel arithmetic mean over channels.
    pub fn channel_avg(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "channel_avg")?;
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = vec![0.0; hw];
        for plane in d.chunks_exact(hw) {
            add_into(&mut out, plane);
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        self.push(Op::ChannelAvg(x), Tensor::from_parts(vec![1, h, w], out))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in row-major window order.
    pub fn spatial_maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "spatial_maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(geom_err(format!("spatial_maxpool2: {h}x{w} is not even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if d[cand] > d[best] {
                            best = cand;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Op::MaxPool2 { x, argmax }, Tensor::from_parts(vec![c, ho, wo], out))
    }

    /// `[C,H,W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "global_avg_pool")?;
        let hw = (h * w) as f64;
        let out = self.value(x).data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        self.push(Op::GlobalAvgPool(x), Tensor::from_parts(vec![c], out))
    }

    /// Concatenate along axis 0 (the channel axis of `[C,H,W]` tensors).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err("concat: no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(dim_err(format!("concat: trailing shape {:?} != {tail:?}", &s[1..])));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Op::Concat(xs.to_vec()), Tensor::from_parts(shape, data))
    }

    // ---- reductions and losses ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    /// `-log softmax(logits)[label]` for a single sample; `logits` is flattened.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Label { label, num_classes: z.len() });
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        self.push(Op::CrossEntropy { logits, label, probs }, Tensor::scalar(loss))
    }

    /// Convenience: `sum(x ⊙ weights)` with `weights` held constant.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let w = self.constant(weights);
        let p = self.mul(x, w)?;
        self.sum(p)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Populates gradients on every
    /// leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).numel() != 1 {
            return Err(dim_err(format!("backward: loss must be a single element, got {:?}", self.shape(loss))));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            let mut contribs = vjp(&self.nodes, i, &g);
            if self.corrupted == Some(self.nodes[i].op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if c.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("backward of {}", self.nodes[i].op.kind().name())));
                }
                match &mut self.grads[v.0] {
                    Some(acc) => add_into(acc, &c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian products of node `i` given its output gradient `g`.
fn vjp(nodes: &[Node], i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: &Var| nodes[v.0].value.data();
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let mut r = Vec::new();
            if needs(a) {
                r.push((*a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect()));
            }
            if needs(b) {
                r.push((*b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect()));
            }
            r
        }
        Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::BroadcastMul(x, m) => {
            let md = val(m);
            let xd = val(x);
            let hw = md.len();
            let mut r = Vec::new();
            if needs(x) {
                let gx = g.chunks_exact(hw).flat_map(|gp| gp.iter().zip(md).map(|(a, b)| a * b)).collect();
                r.push((*x, gx));
            }
            if needs(m) {
                let mut gm = vec![0.0; hw];
                for (gp, xp) in g.chunks_exact(hw).zip(xd.chunks_exact(hw)) {
                    for p in 0..hw {
                        gm[p] += gp[p] * xp[p];
                    }
                }
                r.push((*m, gm));
            }
            r
        }
        Op::Sigmoid(x) => vec![(*x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
        Op::Relu(x) => vec![(*x, g.iter().zip(val(x)).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect())],
        Op::Gelu(x) => vec![(*x, g.iter().zip(val(x)).map(|(g, v)| g * gelu_grad(*v)).collect())],
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
            let n = *sb.last().unwrap();
            let (ad, bd) = (val(a), val(b));
            let mut r = Vec::new();
            if needs(a) {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
                r.push((*a, ga));
            }
            if needs(b) {
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        0.0,
                    );
                }
                r.push((*b, gb));
            }
            r
        }
        Op::Linear { x, w, b } => {
            let ws = nodes[w.0].value.shape();
            let (out_dim, fan_in) = (ws[0], ws[1]);
            let rows = g.len() / out_dim;
            let mut r = Vec::new();
            if needs(x) {
                let mut gx = vec![0.0; rows * fan_in];
                gemm(rows, out_dim, fan_in, g, false, val(w), false, &mut gx, 0.0);
                r.push((*x, gx));
            }
            if needs(w) {
                let mut gw = vec![0.0; out_dim * fan_in];
                gemm(out_dim, rows, fan_in, g, true, val(x), false, &mut gw, 0.0);
                r.push((*w, gw));
            }
            if let Some(b) = b {
                if needs(b) {
                    let mut gb = vec![0.0; out_dim];
                    for row in g.chunks_exact(out_dim) {
                        add_into(&mut gb, row);
                    }
                    r.push((*b, gb));
                }
            }
            r
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let gm = val(gamma);
            let d = gm.len();
            let xd = val(x);
            let mut gx = vec![0.0; xd.len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for (row, ((xr, gr), gxr)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate() {
                let (mu, rs) = (mean[row], rstd[row]);
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..d {
                    let xhat = (xr[j] - mu) * rs;
                    let dxhat = gr[j] * gm[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    ggamma[j] += gr[j] * xhat;
                    gbeta[j] += gr[j];
                }
                let (m1, m2) = (sum_dxhat / d as f64, sum_dxhat_xhat / d as f64);
                for j in 0..d {
                    let xhat = (xr[j] - mu) * rs;
                    gxr[j] = rs * (gr[j] * gm[j] - m1 - xhat * m2);
                }
            }
            vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
        }
        Op::Softmax(x) => {
            let d = *nodes[i].value.shape().last().unwrap();
            let mut gx = Vec::with_capacity(g.len());
            for (yr, gr) in out.chunks_exact(d).zip(g.chunks_exact(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            vec![(*x, gx)]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (_, gx) = permute_data(g, nodes[i].value.shape(), &inverse);
            vec![(*x, gx)]
        }
        Op::Conv2d { x, w, b, geom } => {
            let c_out = nodes[w.0].value.shape()[0];
            let ncol = geom.col_cols();
            let krows = geom.col_rows();
            let mut r = Vec::new();
            if needs(w) {
                let xd = val(x);
                let owned;
                let cols: &[f64] = if geom.is_pointwise() {
                    xd
                } else {
                    owned = im2col(xd, geom);
                    &owned
                };
                let mut gw = vec![0.0; c_out * krows];
                gemm(c_out, ncol, krows, g, false, cols, true, &mut gw, 0.0);
                r.push((*w, gw));
            }
            if needs(b) {
                r.push((*b, g.chunks_exact(ncol).map(|p| p.iter().sum()).collect()));
            }
            if needs(x) {
                let mut gcols = vec![0.0; krows * ncol];
                gemm(krows, c_out, ncol, val(w), true, g, false, &mut gcols, 0.0);
                if geom.is_pointwise() {
                    r.push((*x, gcols));
                } else {
                    let mut gx = vec![0.0; geom.c_in * geom.h * geom.w];
                    col2im_add(&gcols, geom, &mut gx);
                    r.push((*x, gx));
                }
            }
            r
        }
        Op::ChannelMax { x, argmax } => {
            let hw = argmax.len();
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for p in 0..hw {
                gx[argmax[p] * hw + p] = g[p];
            }
            vec![(*x, gx)]
        }
        Op::ChannelAvg(x) => {
            let n = nodes[x.0].value.numel();
            let c = nodes[x.0].value.shape()[0] as f64;
            let hw = g.len();
            vec![(*x, (0..n).map(|j| g[j % hw] / c).collect())]
        }
        Op::MaxPool2 { x, argmax } => {
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            vec![(*x, gx)]
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[x.0].value.shape();
            let hw = s[1] * s[2];
            let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
            vec![(*x, gx)]
        }
        Op::Concat(xs) => {
            let mut off = 0;
            let mut r = Vec::with_capacity(xs.len());
            for x in xs {
                let n = nodes[x.0].value.numel();
                r.push((*x, g[off..off + n].to_vec()));
                off += n;
            }
            r
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; nodes[x.0].value.numel()])],
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            vec![(*x, vec![g[0] / n as f64; n])]
        }
        Op::CrossEntropy { logits, label, probs } => {
            let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
            gx[*label] -= g[0];
            vec![(*logits, gx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_and_counting() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 3, 3], |i| i as f64 - 4.0).unwrap());
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));

        let x = g.constant(Tensor::ones(vec![1, 4, 4]).unwrap());
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]).unwrap());
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), [1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![2, 4, 4]).unwrap());
        let w = g.constant(Tensor::ones(vec![1, 3, 3, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]).unwrap());
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Dimension(_))));
        let x = g.constant(Tensor::ones(vec![3, 2, 2]).unwrap());
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Geometry(_))));
        let w5 = g.constant(Tensor::ones(vec![1, 3, 5, 5]).unwrap());
        assert!(matches!(g.conv2d(x, w5, b, 1, 2), Err(Error::Geometry(_))));
    }

    #[test]
    fn channel_reductions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1], &[3.0, -1.0]));
        let mx = g.channel_max(x).unwrap();
        let av = g.channel_avg(x).unwrap();
        assert_eq!(g.value(mx).data(), [3.0]);
        assert_eq!(g.value(av).data(), [1.0]);
        let one = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let a = g.channel_max(one).unwrap();
        let b = g.channel_avg(one).unwrap();
        assert!(g.value(a).bit_eq(g.value(one)));
        assert!(g.value(b).bit_eq(g.value(one)));
    }

    #[test]
    fn maxpool_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.spatial_maxpool2(x).unwrap();
        assert_eq!(g.shape(y), [1, 1, 1]);
        assert_eq!(g.value(y).data(), [4.0]);
        let c = g.constant(Tensor::full(vec![2, 4, 6], 0.25).unwrap());
        let y = g.spatial_maxpool2(c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
        let odd = g.constant(Tensor::ones(vec![1, 3, 4]).unwrap());
        assert!(matches!(g.spatial_maxpool2(odd), Err(Error::Geometry(_))));
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(vec![1, 2, 2], 1.0).unwrap());
        let y = g.spatial_maxpool2(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), [1.0, 0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::full(vec![3, 1, 1], 2.0).unwrap());
        let y = g.channel_max(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn trivial_backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.5 - 1.0).unwrap());
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let xv = Tensor::from_fn(vec![4], |i| i as f64 - 1.5).unwrap();
        let x = g.param(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().bit_eq(&xv));
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(vec![3]).unwrap());
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::DoubleBackward)));
        g.zero_grads();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(vec![3]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), [4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert!(g.value(back).bit_eq(g.value(x)));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![5]).unwrap());
        let l = g.cross_entropy(z, 2).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-15);
        let z = g.constant(t(&[2], &[30.0, 0.0]));
        let l = g.cross_entropy(z, 0).unwrap();
        assert!(g.value(l).item() < 1e-9);
        assert!(matches!(g.cross_entropy(z, 2), Err(Error::Label { label: 2, num_classes: 2 })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![3, 5], |i| (i as f64 * 1.7).sin() * 20.0).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.scale(x, f64::INFINITY), Err(Error::NonFinite(_))));
    }

    #[test]
    fn op_names_roundtrip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
