//! Position-calibration subbranch.
//!
//! The onset frame is box-filtered down to 14x14, each pixel becomes a
//! 3-value token, tokens are projected to the embedding width, a learned
//! positional table is added, and a pre-norm transformer encoder mixes them.
//! The 196 output tokens are folded back into an `[D,14,14]` map.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GRID: usize = 14;
pub const NUM_PATCHES: usize = GRID * GRID;
pub const EMBED_DIM: usize = 512;
pub const MLP_RATIO: usize = 4;
pub const POS_EMBED_STD: f64 = 0.02;

/// Average non-overlapping `factor x factor` boxes of a `[C,H,W]` image.
pub fn box_downscale(img: &Tensor, factor: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(dim_err(format!("box_downscale expects [C,H,W], got {:?}", img.shape())));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(crate::error::geom_err(format!("{h}x{w} is not divisible into {factor}x{factor} boxes")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let d = img.data();
    let norm = (factor * factor) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for y in oy * factor..(oy + 1) * factor {
                    let row = &d[(ch * h + y) * w + ox * factor..(ch * h + y) * w + (ox + 1) * factor];
                    s += row.iter().sum::<f64>();
                }
                out[(ch * ho + oy) * wo + ox] = s / norm;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// `[3,14,14]` → `[196,3]`; token `row*14 + col` holds the pixel at `(row, col)`.
pub fn patchify(img: &Tensor) -> Result<Tensor> {
    if img.shape() != [3, GRID, GRID] {
        return Err(dim_err(format!("patchify expects [3,{GRID},{GRID}], got {:?}", img.shape())));
    }
    let d = img.data();
    let data = (0..NUM_PATCHES).flat_map(|t| (0..3).map(move |c| d[c * NUM_PATCHES + t])).collect();
    Tensor::new(vec![NUM_PATCHES, 3], data)
}

/// Inverse of [`patchify`] for any token width: `[196,C]` → `[C,14,14]`.
pub fn unpatchify(tokens: &Tensor) -> Result<Tensor> {
    let &[n, c] = tokens.shape() else {
        return Err(dim_err(format!("unpatchify expects [196,C], got {:?}", tokens.shape())));
    };
    if n != NUM_PATCHES {
        return Err(dim_err(format!("unpatchify expects {NUM_PATCHES} tokens, got {n}")));
    }
    let d = tokens.data();
    let data = (0..c).flat_map(|ch| (0..n).map(move |t| d[t * c + ch])).collect();
    Tensor::new(vec![c, GRID, GRID], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PcConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for PcConfig {
    fn default() -> Self {
        Self { dim: EMBED_DIM, num_layers: 2, num_heads: 4, mlp_ratio: MLP_RATIO }
    }
}

impl PcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("the encoder needs at least one layer".into()));
        }
        if self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    pub projection: Linear,
    pub pos_embed: ParamId,
}

impl PatchEmbedder {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut Rng) -> Self {
        let projection = Linear::new(store, "pc.embed.proj", 3, dim, rng);
        let pos = Tensor::randn(vec![NUM_PATCHES, dim], POS_EMBED_STD, rng).expect("dim > 0");
        let pos_embed = store.add("pc.embed.pos", pos);
        Self { projection, pos_embed }
    }

    /// `[196,3]` patches → `[196,D]` embeddings with positions added.
    pub fn forward(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
        let e = self.projection.forward(g, p, patches)?;
        g.add(e, p[self.pos_embed])
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MsaOutput {
    pub tokens: Var,
    /// `[heads, n, n]` attention weights; rows sum to one.
    pub weights: Var,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("embedding width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<MsaOutput> {
        let &[n, dim] = g.shape(x) else {
            return Err(dim_err(format!("self-attention expects [N,D] tokens, got {:?}", g.shape(x))));
        };
        if dim % self.heads != 0 {
            return Err(Error::Config(format!("embedding width {dim} is not divisible by {} heads", self.heads)));
        }
        let hd = dim / self.heads;
        let split = |g: &mut Graph, v: Var, axes: &[usize]| -> Result<Var> {
            let r = g.reshape(v, &[n, self.heads, hd])?;
            g.permute(r, axes)
        };
        let q = self.query.forward(g, p, x)?;
        let q = split(g, q, &[1, 0, 2])?;
        let k = self.key.forward(g, p, x)?;
        let kt = split(g, k, &[1, 2, 0])?;
        let v = self.value.forward(g, p, x)?;
        let v = split(g, v, &[1, 0, 2])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let mixed = g.matmul(weights, v)?;
        let merged = g.permute(mixed, &[1, 0, 2])?;
        let merged = g.reshape(merged, &[n, dim])?;
        let tokens = self.out.forward(g, p, merged)?;
        Ok(MsaOutput { tokens, weights })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub msa: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PcConfig, rng: &mut Rng) -> Result<Self> {
        let hidden = cfg.dim * cfg.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim),
            msa: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.num_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), cfg.dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, cfg.dim, rng),
        })
    }

    /// Pre-norm: `x + msa(ln1(x))`, then `x + mlp(ln2(x))`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<MsaOutput> {
        let h = self.norm1.forward(g, p, x)?;
        let attn = self.msa.forward(g, p, h)?;
        let x = g.add(x, attn.tokens)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        let tokens = g.add(x, h)?;
        Ok(MsaOutput { tokens, weights: attn.weights })
    }
}

#[derive(Clone, Debug)]
pub struct PcModule {
    pub config: PcConfig,
    pub embedder: PatchEmbedder,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct PcOutput {
    /// Position embeddings, `[D,14,14]`.
    pub e_pos: Var,
    /// Per-layer attention weights.
    pub attn_weights: Vec<Var>,
}

impl PcModule {
    pub fn new(store: &mut ParamStore, config: PcConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embedder = PatchEmbedder::new(store, config.dim, rng);
        let layers = (0..config.num_layers)
            .map(|i| EncoderLayer::new(store, &format!("pc.layers.{i}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, embedder, layers })
    }

    /// `onset_small` is the `[3,14,14]` downscaled onset frame.
    pub fn forward(&self, g: &mut Graph, p: &Bound, onset_small: &Tensor) -> Result<PcOutput> {
        let patches = g.constant(patchify(onset_small)?);
        let mut x = self.embedder.forward(g, p, patches)?;
        let mut attn_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(g, p, x)?;
            x = out.tokens;
            attn_weights.push(out.weights);
        }
        let channels_first = g.transpose(x)?;
        let e_pos = g.reshape(channels_first, &[self.config.dim, GRID, GRID])?;
        Ok(PcOutput { e_pos, attn_weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_indexing() {
        let c = Tensor::from_fn(vec![3, GRID, GRID], |i| [0.1, 0.5, 0.9][i / NUM_PATCHES]).unwrap();
        let p = patchify(&c).unwrap();
        for t in 0..NUM_PATCHES {
            assert_eq!(&p.data()[t * 3..t * 3 + 3], &[0.1, 0.5, 0.9]);
        }
        let mut one = Tensor::zeros(vec![3, GRID, GRID]).unwrap();
        one.data_mut()[1] = 1.0; // channel 0, row 0, col 1
        let p = patchify(&one).unwrap();
        let nonzero: Vec<usize> = (0..NUM_PATCHES).filter(|t| p.data()[t * 3..t * 3 + 3].iter().any(|&v| v != 0.0)).collect();
        assert_eq!(nonzero, [1]);
        assert!(patchify(&Tensor::zeros(vec![3, 14, 13]).unwrap()).is_err());
    }

    #[test]
    fn box_downscale_averages() {
        let img = Tensor::from_fn(vec![1, 4, 4], |i| i as f64).unwrap();
        let d = box_downscale(&img, 2).unwrap();
        assert_eq!(d.data(), [2.5, 4.5, 10.5, 12.5]);
        assert!(box_downscale(&img, 3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PcConfig { num_heads: 3, ..PcConfig::default() }.validate().is_err());
        assert!(PcConfig { num_layers: 0, ..PcConfig::default() }.validate().is_err());
        for (l, h) in [(2, 2), (2, 4), (2, 8), (3, 2), (3, 4), (3, 8)] {
            assert!(PcConfig { num_layers: l, num_heads: h, ..PcConfig::default() }.validate().is_ok());
        }
    }
}
