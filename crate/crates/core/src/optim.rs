//! AdamW with decoupled weight decay, and the exponential learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Zeroed moments shaped like `store`.
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { beta1: BETA1, beta2: BETA2, eps: ADAM_EPS, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with `grads[i]` for parameter `i`. Nothing is modified when
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(g.len(), self.m[i].len(), "gradient size of {}", store.name(i));
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` (element {j} is {})", store.name(i), g[j])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.tensor_mut(i).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] = p[k] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr(e) = lr0 * gamma^e`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        (0..epoch).fold(self.lr0, |lr, _| lr * self.gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p));
        s
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut s = single(0.7);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(s.tensor(0).item(), 0.7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = single(2.0);
        let mut opt = AdamW::new(&s, 0.5);
        opt.step(&mut s, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(s.tensor(0).item(), 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = single(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        let err = opt.step(&mut s, &[vec![f64::NAN]], 0.1).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(opt.steps(), 0);
        assert_eq!(s.tensor(0).item(), 1.0);
    }

    #[test]
    fn schedule_ratio() {
        let s = LrSchedule { lr0: 0.0008, gamma: 0.9354 };
        assert_eq!(s.lr(0), 0.0008);
        for e in 0..70 {
            let r = s.lr(e + 1) / s.lr(e);
            assert!((r - s.gamma).abs() <= 2.0 * f64::EPSILON, "epoch {e}: {r}");
            assert!(s.lr(e + 1) < s.lr(e));
        }
    }
}
