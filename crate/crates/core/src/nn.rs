//! Parameter storage and the parameterized layers both branches are built from.

use std::ops::Index;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors. Registration order is the manifest and
/// checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.param(t.clone())).collect() }
    }

    /// Register every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect() }
    }
}

/// Graph handles of a [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).expect("layer shapes are positive")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(vec![c_out, c_in, k, k], c_in * k * k, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]).expect("c_out > 0"));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], p[self.bias], self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(vec![fan_out, fan_in], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]).expect("fan_out > 0"));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![dim]).expect("dim > 0"));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]).expect("dim > 0"));
        Self { gamma, beta }
    }

    /// Normalize over the last axis.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }

    /// Normalize a `[C,H,W]` map over its channel axis, independently per pixel.
    pub fn forward_channels(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let flat = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
        let pixels = g.transpose(flat)?;
        let normed = g.layer_norm(pixels, p[self.gamma], p[self.beta])?;
        let back = g.transpose(normed)?;
        g.reshape(back, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_norm_normalizes_each_pixel() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let mut rng = Rng::new(1);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::randn(vec![4, 3, 2], 2.0, &mut rng).unwrap());
        let y = ln.forward_channels(&mut g, &p, x).unwrap();
        let v = g.value(y);
        for pix in 0..6 {
            let col: Vec<f64> = (0..4).map(|c| v.data()[c * 6 + pix]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn store_order_is_registration_order() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        Conv2d::new(&mut store, "a", 2, 3, 3, 1, 1, &mut rng);
        Linear::new(&mut store, "b", 3, 2, &mut rng);
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.weight", "a.bias", "b.weight", "b.bias"]);
        assert_eq!(store.total_count(), 54 + 3 + 6 + 2);
    }
}
