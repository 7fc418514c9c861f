//! Central finite-difference gradient checking.
//!
//! The analytic side comes from [`Graph::backward`]; the numeric side only
//! ever runs forward passes, so the two routes share nothing but the forward
//! kernels.

use crate::ca::AttentionHook;
use crate::error::Result;
use crate::model::{loss, MmNet};
use crate::graph::{Graph, OpKind, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-4;
/// Step for whole-model probes. A shift of 1e-4 in an early bias moves many
/// pixels across relu and max kinks at once.
pub const MODEL_FD_EPS: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// A scalar function of several tensors, built on a fresh graph.
pub trait ScalarFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval<F: ScalarFn>(f: &F, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of `f` w.r.t. every input.
pub fn analytic_grads<F: ScalarFn>(f: &F, inputs: &[Tensor], corrupt: Option<OpKind>) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    if let Some(k) = corrupt {
        g.corrupt_backward(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()).expect("valid shape")))
        .collect())
}

/// Central difference `(f(x+e) - f(x-e)) / 2e` for one element.
pub fn numeric_partial<F: ScalarFn>(f: &F, inputs: &[Tensor], which: usize, elem: usize, eps: f64) -> Result<f64> {
    let mut probe = inputs.to_vec();
    let x0 = inputs[which].data()[elem];
    probe[which].data_mut()[elem] = x0 + eps;
    let up = eval(f, &probe)?;
    probe[which].data_mut()[elem] = x0 - eps;
    let down = eval(f, &probe)?;
    Ok((up - down) / (2.0 * eps))
}

/// Worst relative error over every element of every input.
pub fn check<F: ScalarFn>(f: &F, inputs: &[Tensor], corrupt: Option<OpKind>) -> Result<f64> {
    let grads = analytic_grads(f, inputs, corrupt)?;
    let mut worst = 0.0f64;
    for (i, grad) in grads.iter().enumerate() {
        for e in 0..inputs[i].numel() {
            let n = numeric_partial(f, inputs, i, e, FD_EPS)?;
            worst = worst.max(relative_error(grad.data()[e], n));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst < FD_TOLERANCE
    }
}

/// Random tensor whose entries stay at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.uniform_in(gap, 1.5);
        if rng.bernoulli(0.5) { v } else { -v }
    })
    .expect("valid shape")
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng).expect("valid shape")
}

/// `[C,H,W]` tensor where each reduction group (channels at one pixel, or
/// one 2x2 window) has pairwise-separated entries, so max ops stay away from ties.
fn separated_chw(c: usize, h: usize, w: usize, over_channels: bool, rng: &mut Rng) -> Tensor {
    let mut data = vec![0.0; c * h * w];
    if over_channels {
        for p in 0..h * w {
            let base = rng.normal();
            let mut order: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut order);
            for (ch, rank) in order.into_iter().enumerate() {
                data[ch * h * w + p] = base + 0.1 * rank as f64;
            }
        }
    } else {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let base = rng.normal();
                    let mut ranks = [0usize, 1, 2, 3];
                    rng.shuffle(&mut ranks);
                    let cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
                    for ((dy, dx), r) in cells.into_iter().zip(ranks) {
                        data[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx] = base + 0.1 * r as f64;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("valid shape")
}

type Instance = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Random instance of one op followed by a fixed random projection to a scalar.
fn instance(kind: OpKind, rng: &mut Rng) -> Instance {
    let dim = |rng: &mut Rng, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
    let (inputs, op): Instance = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            (
                vec![randn(&s, rng), randn(&s, rng)],
                Box::new(move |g, v| match kind {
                    OpKind::Add => g.add(v[0], v[1]),
                    OpKind::Sub => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }),
            )
        }
        OpKind::Scale => {
            let s = rng.normal();
            (vec![randn(&[dim(rng, 1, 6)], rng)], Box::new(move |g, v| g.scale(v[0], s)))
        }
        OpKind::AddScalar => {
            let s = rng.normal();
            (vec![randn(&[dim(rng, 1, 6)], rng)], Box::new(move |g, v| g.add_scalar(v[0], s)))
        }
        OpKind::BroadcastMul => {
            let (c, h, w) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            (vec![randn(&[c, h, w], rng), randn(&[1, h, w], rng)], Box::new(|g, v| g.broadcast_mul(v[0], v[1])))
        }
        OpKind::Sigmoid => (vec![randn(&[dim(rng, 1, 8)], rng)], Box::new(|g, v| g.sigmoid(v[0]))),
        OpKind::Relu => (vec![away_from_zero(&[dim(rng, 1, 8)], 0.05, rng)], Box::new(|g, v| g.relu(v[0]))),
        OpKind::Gelu => (vec![randn(&[dim(rng, 1, 8)], rng)], Box::new(|g, v| g.gelu(v[0]))),
        OpKind::MatMul => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            if rng.bernoulli(0.5) {
                (vec![randn(&[m, k], rng), randn(&[k, n], rng)], Box::new(|g, v| g.matmul(v[0], v[1])))
            } else {
                let b = dim(rng, 1, 3);
                (vec![randn(&[b, m, k], rng), randn(&[b, k, n], rng)], Box::new(|g, v| g.matmul(v[0], v[1])))
            }
        }
        OpKind::Linear => {
            let (n, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
            (
                vec![randn(&[n, i], rng), randn(&[o, i], rng), randn(&[o], rng)],
                Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
            )
        }
        OpKind::LayerNorm => {
            let (n, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
            (
                vec![randn(&[n, d], rng), randn(&[d], rng), randn(&[d], rng)],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
            )
        }
        OpKind::Softmax => (vec![randn(&[dim(rng, 1, 3), dim(rng, 1, 5)], rng)], Box::new(|g, v| g.softmax(v[0]))),
        OpKind::Reshape => {
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            (vec![randn(&[a, b], rng)], Box::new(move |g, v| g.reshape(v[0], &[b, a])))
        }
        OpKind::Permute => {
            let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let mut axes = [0, 1, 2];
            rng.shuffle(&mut axes);
            (vec![randn(&s, rng)], Box::new(move |g, v| g.permute(v[0], &axes)))
        }
        OpKind::Conv2d => {
            let k = if rng.bernoulli(0.5) { 3 } else { 1 };
            let (ci, co) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
            let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
            (
                vec![randn(&[ci, h, w], rng), randn(&[co, ci, k, k], rng), randn(&[co], rng)],
                Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)),
            )
        }
        OpKind::ChannelMax => {
            let (c, h, w) = (dim(rng, 1, 5), dim(rng, 1, 4), dim(rng, 1, 4));
            (vec![separated_chw(c, h, w, true, rng)], Box::new(|g, v| g.channel_max(v[0])))
        }
        OpKind::ChannelAvg => {
            let s = [dim(rng, 1, 5), dim(rng, 1, 4), dim(rng, 1, 4)];
            (vec![randn(&s, rng)], Box::new(|g, v| g.channel_avg(v[0])))
        }
        OpKind::MaxPool2 => {
            let (c, h, w) = (dim(rng, 1, 3), 2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3));
            (vec![separated_chw(c, h, w, false, rng)], Box::new(|g, v| g.spatial_maxpool2(v[0])))
        }
        OpKind::GlobalAvgPool => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)];
            (vec![randn(&s, rng)], Box::new(|g, v| g.global_avg_pool(v[0])))
        }
        OpKind::Concat => {
            let (h, w) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let a = randn(&[dim(rng, 1, 3), h, w], rng);
            let b = randn(&[dim(rng, 1, 3), h, w], rng);
            (vec![a, b], Box::new(|g, v| g.concat(&[v[0], v[1]])))
        }
        OpKind::Sum => (vec![randn(&[dim(rng, 1, 3), dim(rng, 1, 4)], rng)], Box::new(|g, v| g.sum(v[0]))),
        OpKind::Mean => (vec![randn(&[dim(rng, 1, 3), dim(rng, 1, 4)], rng)], Box::new(|g, v| g.mean(v[0]))),
        OpKind::CrossEntropy => {
            let k = dim(rng, 2, 6);
            let label = rng.below(k);
            (vec![randn(&[k], rng)], Box::new(move |g, v| g.cross_entropy(v[0], label)))
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    };
    // Project onto fixed random weights so every output element matters.
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out_shape = op(&mut probe, &vars).map(|v| probe.shape(v).to_vec()).expect("generated instance is valid");
    let weights = randn(&out_shape, rng);
    let f = move |g: &mut Graph, v: &[Var]| {
        let y = op(g, v)?;
        g.weighted_sum(y, weights.clone())
    };
    (inputs, Box::new(f))
}

/// Random composite: conv, channel layer-norm via permute, relu, spatial
/// attention, broadcast product, pooling, linear head and cross-entropy.
fn composite_instance(rng: &mut Rng) -> Instance {
    let (ci, co, k) = (2, 3, 3);
    let x = randn(&[ci, 4, 4], rng);
    let w = Tensor::randn(vec![co, ci, k, k], 0.5, rng).expect("valid shape");
    let b = randn(&[co], rng);
    let gamma = randn(&[co], rng);
    let beta = randn(&[co], rng);
    let aw = randn(&[1, 2, 1, 1], rng);
    let ab = randn(&[1], rng);
    let hw = randn(&[2, co], rng);
    let hb = randn(&[2], rng);
    let label = rng.below(2);
    let f = move |g: &mut Graph, v: &[Var]| {
        let c = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        let r = g.reshape(c, &[co, 16])?;
        let t = g.transpose(r)?;
        let n = g.layer_norm(t, v[3], v[4])?;
        let t = g.transpose(n)?;
        let f = g.reshape(t, &[co, 4, 4])?;
        let f = g.gelu(f)?;
        let mx = g.channel_max(f)?;
        let av = g.channel_avg(f)?;
        let cat = g.concat(&[mx, av])?;
        let a = g.conv2d(cat, v[5], v[6], 1, 0)?;
        let a = g.sigmoid(a)?;
        let y = g.broadcast_mul(f, a)?;
        let p = g.global_avg_pool(y)?;
        let z = g.linear(p, v[7], Some(v[8]))?;
        g.cross_entropy(z, label)
    };
    (vec![x, w, b, gamma, beta, aw, ab, hw, hb], Box::new(f))
}

/// Run the finite-difference check over `instances` random instances of
/// every differentiable op plus a composite pipeline.
pub fn op_suite(instances: usize, seed: u64, corrupt: Option<OpKind>) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (i, kind) in OpKind::DIFFERENTIABLE.into_iter().enumerate() {
        let mut rng = Rng::new(seed).child(&[i as u64]);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (inputs, f) = instance(kind, &mut rng);
            worst = worst.max(check(&f, &inputs, corrupt)?);
        }
        reports.push(OpReport { name: kind.name().to_string(), instances, worst });
    }
    let mut rng = Rng::new(seed).child(&[u64::MAX]);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (inputs, f) = composite_instance(&mut rng);
        worst = worst.max(check(&f, &inputs, corrupt)?);
    }
    reports.push(OpReport { name: "composite".into(), instances, worst });
    Ok(reports)
}

/// One parameter coordinate of an end-to-end check.
#[derive(Clone, Debug)]
pub struct ParamProbe {
    pub name: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ParamProbe {
    pub fn error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

fn model_loss(model: &MmNet, onset: &Tensor, apex: &Tensor, label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let pass = model.forward(&mut g, &p, onset, apex, AttentionHook::None)?;
    let l = loss(&mut g, pass.logits, label)?;
    Ok(g.value(l).item())
}

/// Finite-difference check of the cross-entropy loss of `model` on one pair
/// w.r.t. `count` parameter coordinates. Each probe picks a random parameter
/// tensor; even probes take a random element of it, odd probes the element
/// with the largest analytic gradient.
pub fn model_check(
    model: &MmNet,
    onset: &Tensor,
    apex: &Tensor,
    label: usize,
    count: usize,
    rng: &mut Rng,
    corrupt: Option<OpKind>,
) -> Result<Vec<ParamProbe>> {
    let mut g = Graph::new();
    if let Some(k) = corrupt {
        g.corrupt_backward(k);
    }
    let p = model.params().bind(&mut g);
    let pass = model.forward(&mut g, &p, onset, apex, AttentionHook::None)?;
    let l = loss(&mut g, pass.logits, label)?;
    g.backward(l)?;
    let mut probe_model = model.clone();
    let mut probes = Vec::with_capacity(count);
    for k in 0..count {
        let i = rng.below(model.params().len());
        let grad = g.grad(p.vars()[i]).map(Tensor::into_vec).unwrap_or_else(|| vec![0.0; model.params().tensor(i).numel()]);
        let element = if k % 2 == 0 {
            rng.below(grad.len())
        } else {
            (0..grad.len()).fold(0, |best, e| if grad[e].abs() > grad[best].abs() { e } else { best })
        };
        let x0 = model.params().tensor(i).data()[element];
        probe_model.params_mut().tensor_mut(i).data_mut()[element] = x0 + MODEL_FD_EPS;
        let up = model_loss(&probe_model, onset, apex, label)?;
        probe_model.params_mut().tensor_mut(i).data_mut()[element] = x0 - MODEL_FD_EPS;
        let down = model_loss(&probe_model, onset, apex, label)?;
        probe_model.params_mut().tensor_mut(i).data_mut()[element] = x0;
        probes.push(ParamProbe {
            name: model.params().name(i).to_string(),
            element,
            analytic: grad[element],
            numeric: (up - down) / (2.0 * MODEL_FD_EPS),
        });
    }
    Ok(probes)
}
