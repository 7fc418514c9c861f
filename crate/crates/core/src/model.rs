//! Full network: main branch on `apex - onset`, position calibration on the
//! downscaled onset, additive fusion, global average pooling and a linear
//! classifier.

use serde::{Deserialize, Serialize};

use crate::ca::{AttentionHook, AttentionMode, MainBranch, MainOutput, INPUT_SIZE, MAIN_CHANNELS};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Linear, ParamStore};
use crate::pc::{box_downscale, PcConfig, PcModule, PcOutput, GRID};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture switches. `use_ca = false` swaps continuous-attention blocks
/// for plain residual blocks; `use_pc = false` drops the subbranch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub use_ca: bool,
    pub use_pc: bool,
    pub attn_mode: AttentionMode,
    pub num_layers: usize,
    pub num_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            use_ca: true,
            use_pc: true,
            attn_mode: AttentionMode::Continuous,
            num_layers: 2,
            num_heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn pc_config(&self) -> PcConfig {
        PcConfig { num_layers: self.num_layers, num_heads: self.num_heads, ..PcConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        self.pc_config().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Tensor) -> Self {
        let z = logits.data();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let probabilities = e.iter().map(|v| v / s).collect();
        // first index wins ties
        let predicted_class = z
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > z[best] { i } else { best });
        Self { logits, probabilities, predicted_class }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

pub struct ForwardPass {
    pub logits: Var,
    pub main: MainOutput,
    pub pc: Option<PcOutput>,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct MmNet {
    config: ModelConfig,
    store: ParamStore,
    pub main: MainBranch,
    pub pc: Option<PcModule>,
    pub head: Linear,
}

impl MmNet {
    /// Freshly initialized network. Parameters are drawn from `rng` in
    /// manifest order: main branch, subbranch, head.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mode = config.use_ca.then_some(config.attn_mode);
        let main = MainBranch::new(&mut store, mode, rng);
        let pc = if config.use_pc { Some(PcModule::new(&mut store, config.pc_config(), rng)?) } else { None };
        let width = *MAIN_CHANNELS.last().unwrap();
        let head = Linear::new(&mut store, "head", width, config.num_classes, rng);
        Ok(Self { config, store, main, pc, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Build the forward pass of one `(onset, apex)` pair onto `g`.
    /// Both frames are `[3,224,224]` in `[0,1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        onset: &Tensor,
        apex: &Tensor,
        hook: AttentionHook,
    ) -> Result<ForwardPass> {
        let expect = [3, INPUT_SIZE, INPUT_SIZE];
        if onset.shape() != expect || apex.shape() != expect {
            return Err(dim_err(format!(
                "frames must both be {expect:?}, got onset {:?} and apex {:?}",
                onset.shape(),
                apex.shape()
            )));
        }
        let on = g.constant(onset.clone());
        let ap = g.constant(apex.clone());
        let diff = g.sub(ap, on)?;
        let main = self.main.forward(g, p, diff, hook)?;
        let (fused, pc) = match &self.pc {
            Some(pc) => {
                let small = box_downscale(onset, INPUT_SIZE / GRID)?;
                let out = pc.forward(g, p, &small)?;
                if g.shape(out.e_pos) != g.shape(main.f_m) {
                    return Err(dim_err(format!(
                        "fusion shapes differ: F_M {:?} vs E_pos {:?}",
                        g.shape(main.f_m),
                        g.shape(out.e_pos)
                    )));
                }
                (g.add(main.f_m, out.e_pos)?, Some(out))
            }
            None => (main.f_m, None),
        };
        let pooled = g.global_avg_pool(fused)?;
        let logits = self.head.forward(g, p, pooled)?;
        Ok(ForwardPass { logits, main, pc, fused })
    }

    /// Inference on one pair; also returns the attention maps (empty for the baseline).
    pub fn predict(&self, onset: &Tensor, apex: &Tensor) -> Result<(Prediction, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let pass = self.forward(&mut g, &p, onset, apex, AttentionHook::None)?;
        let maps = pass.main.attn_maps().iter().map(|v| g.value(*v).clone()).collect();
        Ok((Prediction::from_logits(g.value(pass.logits).clone()), maps))
    }

    pub fn parameter_manifest(&self) -> Vec<ManifestEntry> {
        self.store
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), count: t.numel() })
            .collect()
    }
}

/// Cross-entropy of `logits` against `label`.
pub fn loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    g.cross_entropy(logits, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_argmax_and_probabilities() {
        let p = Prediction::from_logits(Tensor::new(vec![3], vec![0.5, 2.0, -1.0]).unwrap());
        assert_eq!(p.predicted_class, 1);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted = Prediction::from_logits(p.logits.map(|v| v + 123.0));
        assert_eq!(shifted.predicted_class, 1);
    }

    #[test]
    fn config_rejects_bad_heads() {
        let c = ModelConfig { num_heads: 5, ..ModelConfig::default() };
        assert!(matches!(MmNet::new(c, &mut Rng::new(0)), Err(Error::Config(_))));
    }
}
