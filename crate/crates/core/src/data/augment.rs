//! Training-time augmentation and the deterministic evaluation view.
//!
//! Training order: candidate pick, resize to 236, horizontal flip, 224 crop,
//! brightness/contrast jitter. Both frames share every geometric and
//! photometric factor; only the candidate picks are independent.

use crate::data::dataset::SamplePair;
use crate::data::image::{crop, flip_horizontal, resize_bilinear};
use crate::error::{geom_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RESIZE: usize = 236;
pub const CROP: usize = 224;
/// Offset of the centered crop.
pub const CENTER: usize = (RESIZE - CROP) / 2;
pub const BRIGHTNESS_RANGE: f64 = 0.1;
pub const CONTRAST_RANGE: f64 = 0.1;
/// Contrast is scaled around this value.
pub const JITTER_PIVOT: f64 = 0.5;

/// Every random choice of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub onset_pick: usize,
    pub apex_pick: usize,
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
    /// Additive offset.
    pub brightness: f64,
    /// Multiplicative factor around [`JITTER_PIVOT`].
    pub contrast: f64,
}

impl AugmentParams {
    pub fn sample(pair: &SamplePair, rng: &mut Rng) -> Self {
        Self {
            onset_pick: rng.below(pair.onset_candidates.len()),
            apex_pick: rng.below(pair.apex_candidates.len()),
            flip: rng.bernoulli(0.5),
            crop_y: rng.below(RESIZE - CROP + 1),
            crop_x: rng.below(RESIZE - CROP + 1),
            brightness: rng.uniform_in(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE),
            contrast: rng.uniform_in(1.0 - CONTRAST_RANGE, 1.0 + CONTRAST_RANGE),
        }
    }
}

fn prepare(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] < CROP || s[2] < CROP {
        return Err(geom_err(format!("source image {s:?} is smaller than {CROP}x{CROP}")));
    }
    resize_bilinear(img, RESIZE, RESIZE)
}

fn geometric(img: &Tensor, flip: bool, y: usize, x: usize) -> Result<Tensor> {
    let img = prepare(img)?;
    let img = if flip { flip_horizontal(&img) } else { img };
    crop(&img, y, x, CROP)
}

fn jitter(img: Tensor, brightness: f64, contrast: f64) -> Tensor {
    if brightness == 0.0 && contrast == 1.0 {
        return img;
    }
    img.map(|v| ((v + brightness - JITTER_PIVOT) * contrast + JITTER_PIVOT).clamp(0.0, 1.0))
}

/// Apply a fixed draw to the candidate frames of `pair`.
pub fn apply(pair: &SamplePair, p: &AugmentParams) -> Result<(Tensor, Tensor)> {
    let frame = |img: &Tensor| -> Result<Tensor> {
        Ok(jitter(geometric(img, p.flip, p.crop_y, p.crop_x)?, p.brightness, p.contrast))
    };
    Ok((frame(&pair.onset_candidates[p.onset_pick])?, frame(&pair.apex_candidates[p.apex_pick])?))
}

/// Canonical frames, centered crop, no flip or jitter.
pub fn eval_view(pair: &SamplePair) -> Result<(Tensor, Tensor)> {
    Ok((
        geometric(&pair.canonical_onset, false, CENTER, CENTER)?,
        geometric(&pair.canonical_apex, false, CENTER, CENTER)?,
    ))
}

/// `(onset, apex)`, each `[3,224,224]` in `[0,1]`.
pub fn augment(pair: &SamplePair, rng: &mut Rng, training: bool) -> Result<(Tensor, Tensor)> {
    if training {
        apply(pair, &AugmentParams::sample(pair, rng))
    } else {
        eval_view(pair)
    }
}
