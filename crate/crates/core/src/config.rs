//! Run configuration: every hyperparameter and ablation switch of a run,
//! stored as a versioned TOML file.
//!
//! ```toml
//! version = 1
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [dataset]
//! source = "synth"
//! subjects = 3
//! classes = 2
//! samples_per = 1
//!
//! [model]
//! num_classes = 2
//! use_ca = true
//! use_pc = true
//! attn_mode = "continuous"
//! num_layers = 2
//! num_heads = 4
//!
//! [train]
//! lr0 = 0.0008
//! epochs = 70
//! batch_size = 32
//! weight_decay = 0.01
//! ```
//!
//! `train.lr_decay` may be given explicitly; when absent the decay factor is
//! chosen so the last epoch runs at `lr0 / 100`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedurally rendered faces.
    Synth { subjects: usize, classes: usize, samples_per: usize },
    /// An index file on disk.
    Index { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr0: 0.0008, lr_decay: None, epochs: 70, batch_size: 32, weight_decay: 0.01 }
    }
}

impl TrainConfig {
    /// Per-epoch decay factor: the explicit value, or `0.01^(1/(epochs-1))`.
    pub fn decay(&self) -> f64 {
        self.lr_decay.unwrap_or_else(|| {
            if self.epochs > 1 {
                0.01f64.powf(1.0 / (self.epochs - 1) as f64)
            } else {
                1.0
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: "runs/default".into(),
            dataset: DatasetSpec::Synth { subjects: 3, classes: 5, samples_per: 1 },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr0.is_finite() && t.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", t.lr0)));
        }
        if let Some(g) = t.lr_decay {
            if !(g.is_finite() && g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("lr_decay must lie in (0,1), got {g}")));
            }
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", t.weight_decay)));
        }
        if let DatasetSpec::Synth { subjects, classes, samples_per } = self.dataset {
            if subjects == 0 || samples_per == 0 {
                return Err(Error::Config("synthetic dataset needs subjects and samples_per > 0".into()));
            }
            if !(2..=crate::data::synth::MAX_CLASSES).contains(&classes) {
                return Err(Error::Config(format!(
                    "synthetic dataset supports 2..={} classes, got {classes}",
                    crate::data::synth::MAX_CLASSES
                )));
            }
            if classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {classes} classes but the model is configured for {}",
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization with `output_dir` blanked, so
    /// relocating a run does not change its identity.
    pub fn digest(&self) -> [u8; 32] {
        let mut canon = self.clone();
        canon.output_dir.clear();
        Sha256::digest(canon.to_toml().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_digest() {
        let mut c = RunConfig::default();
        c.train.lr_decay = Some(0.9);
        c.seed = 42;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let mut moved = c.clone();
        moved.output_dir = "elsewhere".into();
        assert_eq!(moved.digest(), c.digest());
        moved.seed = 43;
        assert_ne!(moved.digest(), c.digest());
    }

    #[test]
    fn auto_decay_hits_one_percent_at_last_epoch() {
        let t = TrainConfig::default();
        assert!((t.decay() - 0.935_400).abs() < 1e-4);
        assert!((t.lr0 * t.decay().powi(69) - t.lr0 / 100.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let text = RunConfig::default().to_toml().replace("seed = 0", "seed = 0\nbogus = 1");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let text = RunConfig::default().to_toml().replace("batch_size = 32", "batch_size = 0");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }
}
