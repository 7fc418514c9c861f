//! Main branch: continuous-attention blocks over the apex-minus-onset image.
//!
//! Each block computes
//!
//! ```text
//! F_conv = relu(norm(conv1x1(conv3x3_s2(F)) + conv1x1_s2(F)))
//! attn   = sigmoid(conv1x1([chanmax(F_conv); chanavg(F_conv)])) * maxpool2(attn_prev)
//! out    = F_conv ⊛ attn
//! ```
//!
//! The prior factor is dropped for the first block and in independent mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, geom_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv2d, LayerNorm, ParamStore};
use crate::rng::Rng;

/// Input resolution of the main branch.
pub const INPUT_SIZE: usize = 224;
/// Channel widths at the input and after each of the four blocks.
pub const MAIN_CHANNELS: [usize; 5] = [3, 64, 128, 256, 512];
/// Spatial size at the input and after each block.
pub const MAIN_SIZES: [usize; 5] = [224, 112, 56, 28, 14];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Each map is multiplied by the max-pooled map of the previous block.
    Continuous,
    /// Per-block spatial attention with no cross-block prior.
    Independent,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Continuous => "continuous",
            AttentionMode::Independent => "independent",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(AttentionMode::Continuous),
            "independent" => Ok(AttentionMode::Independent),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Test hook that replaces the attention map of a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionHook {
    #[default]
    None,
    /// Use an all-ones map, so block features equal `F_conv`.
    ForceOnes,
}

/// Spatial attention with an optional multiplicative prior.
#[derive(Clone, Debug)]
pub struct CaModule {
    pub attn_conv: Conv2d,
    pub mode: AttentionMode,
}

/// Attention map plus the sigmoid term it was built from.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub attn: Var,
    pub sigma: Var,
}

impl CaModule {
    pub fn new(store: &mut ParamStore, name: &str, mode: AttentionMode, rng: &mut Rng) -> Self {
        Self { attn_conv: Conv2d::new(store, &format!("{name}.attn_conv"), 2, 1, 1, 1, 0, rng), mode }
    }

    /// `f_conv` is `[2C,H,W]`; `prev_attn`, when given, must be `[1,2H,2W]`.
    /// In independent mode the prior is ignored.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f_conv: Var, prev_attn: Option<Var>) -> Result<AttentionOutput> {
        let fs = g.shape(f_conv).to_vec();
        if fs.len() != 3 {
            return Err(dim_err(format!("attention input must be [C,H,W], got {fs:?}")));
        }
        let mx = g.channel_max(f_conv)?;
        let av = g.channel_avg(f_conv)?;
        let pooled = g.concat(&[mx, av])?;
        let logits = self.attn_conv.forward(g, p, pooled)?;
        let sigma = g.sigmoid(logits)?;
        let prior = match (self.mode, prev_attn) {
            (AttentionMode::Continuous, Some(prev)) => Some(prev),
            _ => None,
        };
        let Some(prev) = prior else {
            return Ok(AttentionOutput { attn: sigma, sigma });
        };
        let ps = g.shape(prev).to_vec();
        if ps != [1, 2 * fs[1], 2 * fs[2]] {
            return Err(geom_err(format!(
                "previous attention map {ps:?} does not pool onto {}x{}",
                fs[1], fs[2]
            )));
        }
        let pooled_prior = g.spatial_maxpool2(prev)?;
        let attn = g.mul(sigma, pooled_prior)?;
        Ok(AttentionOutput { attn, sigma })
    }
}

/// One block of the main branch. Without a [`CaModule`] it is the plain
/// residual block used by the baseline.
#[derive(Clone, Debug)]
pub struct CaBlock {
    pub conv3: Conv2d,
    pub conv1_main: Conv2d,
    pub conv1_skip: Conv2d,
    pub norm: LayerNorm,
    pub ca: Option<CaModule>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub features: Var,
    pub f_conv: Var,
    pub attention: Option<AttentionOutput>,
}

impl CaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        in_size: usize,
        attention: Option<AttentionMode>,
        rng: &mut Rng,
    ) -> Self {
        let conv3 = Conv2d::new(store, &format!("{name}.conv3"), in_channels, out_channels, 3, 2, 1, rng);
        let conv1_main = Conv2d::new(store, &format!("{name}.conv1_main"), out_channels, out_channels, 1, 1, 0, rng);
        let conv1_skip = Conv2d::new(store, &format!("{name}.conv1_skip"), in_channels, out_channels, 1, 2, 0, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), out_channels);
        let ca = attention.map(|mode| CaModule::new(store, &format!("{name}.ca"), mode, rng));
        Self { conv3, conv1_main, conv1_skip, norm, ca, in_channels, out_channels, in_size }
    }

    pub fn out_size(&self) -> usize {
        self.in_size / 2
    }

    /// `relu(norm(conv1_main(conv3(x)) + conv1_skip(x)))`.
    pub fn conv_features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let expect = [self.in_channels, self.in_size, self.in_size];
        if g.shape(x) != expect {
            return Err(dim_err(format!("block expects input {expect:?}, got {:?}", g.shape(x))));
        }
        let main = self.conv3.forward(g, p, x)?;
        let main = self.conv1_main.forward(g, p, main)?;
        let skip = self.conv1_skip.forward(g, p, x)?;
        let sum = g.add(main, skip)?;
        let normed = self.norm.forward_channels(g, p, sum)?;
        g.relu(normed)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        prev_attn: Option<Var>,
        hook: AttentionHook,
    ) -> Result<BlockOutput> {
        let f_conv = self.conv_features(g, p, x)?;
        let Some(ca) = &self.ca else {
            return Ok(BlockOutput { features: f_conv, f_conv, attention: None });
        };
        let mut attention = ca.forward(g, p, f_conv, prev_attn)?;
        if hook == AttentionHook::ForceOnes {
            let shape = g.shape(attention.attn).to_vec();
            attention.attn = g.constant(crate::Tensor::ones(shape)?);
        }
        let features = g.broadcast_mul(f_conv, attention.attn)?;
        Ok(BlockOutput { features, f_conv, attention: Some(attention) })
    }
}

/// Four blocks: 3/224 → 64/112 → 128/56 → 256/28 → 512/14.
#[derive(Clone, Debug)]
pub struct MainBranch {
    pub blocks: Vec<CaBlock>,
    pub mode: Option<AttentionMode>,
}

#[derive(Clone, Debug)]
pub struct MainOutput {
    /// Motion-pattern features, `[512,14,14]`.
    pub f_m: Var,
    pub blocks: Vec<BlockOutput>,
}

impl MainOutput {
    /// Attention maps of the four blocks (empty for the baseline).
    pub fn attn_maps(&self) -> Vec<Var> {
        self.blocks.iter().filter_map(|b| b.attention.map(|a| a.attn)).collect()
    }
}

impl MainBranch {
    /// `mode == None` builds the plain residual baseline.
    pub fn new(store: &mut ParamStore, mode: Option<AttentionMode>, rng: &mut Rng) -> Self {
        Self::with_schedule(store, &MAIN_CHANNELS, INPUT_SIZE, mode, rng)
    }

    /// A branch with a custom channel schedule and input size; used by small-scale tests.
    pub fn with_schedule(
        store: &mut ParamStore,
        channels: &[usize],
        input_size: usize,
        mode: Option<AttentionMode>,
        rng: &mut Rng,
    ) -> Self {
        let mut size = input_size;
        let blocks = channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let b = CaBlock::new(store, &format!("main.block{}", i + 1), w[0], w[1], size, mode, rng);
                size /= 2;
                b
            })
            .collect();
        Self { blocks, mode }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, diff: Var, hook: AttentionHook) -> Result<MainOutput> {
        let first = &self.blocks[0];
        let expect = [first.in_channels, first.in_size, first.in_size];
        if g.shape(diff) != expect {
            return Err(dim_err(format!("main branch expects {expect:?}, got {:?}", g.shape(diff))));
        }
        let mut x = diff;
        let mut prev: Option<Var> = None;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(g, p, x, prev, hook)?;
            x = out.features;
            prev = out.attention.map(|a| a.attn);
            outs.push(out);
        }
        Ok(MainOutput { f_m: x, blocks: outs })
    }
}
