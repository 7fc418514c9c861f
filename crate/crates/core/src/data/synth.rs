//! Procedural micro-expression pairs.
//!
//! Each subject gets a face (head ellipse, eyes, brows, nose, mouth) with its
//! own geometry, skin tone and background. A sample renders that face at
//! several expression intensities: onset candidates near 0, apex candidates
//! near 1. The class decides which feature moves. Pixels outside the class
//! deformation boxes are copied from the neutral render, so onset and apex
//! differ only inside those boxes. Per-sample pixel noise is shared by all
//! frames of the sample. Frames are quantized to 8 bits.

use crate::data::dataset::{Dataset, Rect, SamplePair};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SIZE: usize = 236;
pub const CLASS_NAMES: [&str; 5] = ["happiness", "surprise", "disgust", "repression", "others"];
pub const MAX_CLASSES: usize = CLASS_NAMES.len();
pub const ONSET_INTENSITIES: [f64; 4] = [0.0, 0.05, 0.1, 0.15];
pub const APEX_INTENSITIES: [f64; 4] = [0.85, 0.9, 0.95, 1.0];
const NOISE_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub subjects: usize,
    pub classes: usize,
    /// Samples per (subject, class).
    pub samples_per: usize,
}

#[derive(Clone, Copy, Debug)]
struct Face {
    cx: f64,
    cy: f64,
    head_rx: f64,
    head_ry: f64,
    skin: [f64; 3],
    background: [f64; 3],
    hair: [f64; 3],
    eye_dx: f64,
    eye_y: f64,
    eye_rx: f64,
    eye_ry: f64,
    brow_y: f64,
    brow_half: f64,
    mouth_y: f64,
    mouth_half: f64,
}

impl Face {
    fn sample(rng: &mut Rng) -> Self {
        let cx = 118.0 + rng.uniform_in(-2.0, 2.0);
        let cy = 118.0 + rng.uniform_in(-2.0, 2.0);
        let tone = rng.uniform_in(0.55, 0.85);
        let bg = rng.uniform_in(0.1, 0.3);
        let hair = rng.uniform_in(0.05, 0.25);
        let eye_y = cy - rng.uniform_in(24.0, 26.0);
        Self {
            cx,
            cy,
            head_rx: rng.uniform_in(80.0, 90.0),
            head_ry: rng.uniform_in(100.0, 108.0),
            skin: [tone, tone * 0.82, tone * 0.68],
            background: [bg, bg, bg * 1.1],
            hair: [hair, hair * 0.8, hair * 0.7],
            eye_dx: rng.uniform_in(30.0, 36.0),
            eye_y,
            eye_rx: rng.uniform_in(11.0, 13.0),
            eye_ry: rng.uniform_in(5.5, 7.0),
            brow_y: eye_y - rng.uniform_in(16.0, 18.0),
            brow_half: rng.uniform_in(12.0, 15.0),
            mouth_y: cy + rng.uniform_in(47.0, 50.0),
            mouth_half: rng.uniform_in(22.0, 28.0),
        }
    }
}

/// Displacement in pixels at full intensity.
const LIFT: f64 = 8.0;
const LINE: f64 = 3.0;

fn clip_rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Rect {
    let c = |v: f64| v.clamp(0.0, SIZE as f64) as usize;
    Rect { x0: c(x0.floor()), y0: c(y0.floor()), x1: c(x1.ceil()), y1: c(y1.ceil()) }
}

/// Deformation boxes of `class` on `face`.
fn regions(face: &Face, class: usize) -> Vec<Rect> {
    let f = face;
    let pad = LINE + 2.0;
    match class {
        // mouth corners rise / mouth center rises
        0 | 3 => vec![clip_rect(
            f.cx - f.mouth_half - pad,
            f.mouth_y - LIFT - pad,
            f.cx + f.mouth_half + pad,
            f.mouth_y + pad,
        )],
        // brows rise
        1 => [-1.0, 1.0]
            .iter()
            .map(|s| {
                let bx = f.cx + s * f.eye_dx;
                clip_rect(bx - f.brow_half - pad, f.brow_y - LIFT - pad - 2.0, bx + f.brow_half + pad, f.brow_y + pad + 2.0)
            })
            .collect(),
        // nose wrinkles
        2 => vec![clip_rect(f.cx - 12.0, f.eye_y - 2.0, f.cx + 12.0, f.eye_y + 14.0)],
        // eyes narrow
        _ => [-1.0, 1.0]
            .iter()
            .map(|s| {
                let ex = f.cx + s * f.eye_dx;
                clip_rect(ex - f.eye_rx - 2.0, f.eye_y - f.eye_ry - 2.0, ex + f.eye_rx + 2.0, f.eye_y + f.eye_ry + 2.0)
            })
            .collect(),
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Colour of pixel `(x, y)` of `face` showing `class` at intensity `t`.
fn shade(f: &Face, class: usize, t: f64, x: f64, y: f64) -> [f64; 3] {
    let hx = (x - f.cx) / f.head_rx;
    let hy = (y - f.cy) / f.head_ry;
    if hx * hx + hy * hy > 1.0 {
        return f.background;
    }
    let lip = [0.62, 0.22, 0.26];
    // mouth
    let u = (x - f.cx) / f.mouth_half;
    if u.abs() <= 1.0 {
        let lift = match class {
            0 => t * LIFT * u * u,
            3 => t * LIFT * (1.0 - u * u),
            _ => 0.0,
        };
        if (y - (f.mouth_y - lift)).abs() <= LINE {
            return lip;
        }
    }
    for s in [-1.0, 1.0] {
        // eyes
        let ex = f.cx + s * f.eye_dx;
        let ry = if class == 4 { f.eye_ry * (1.0 - 0.6 * t) } else { f.eye_ry };
        let (dx, dy) = ((x - ex) / f.eye_rx, (y - f.eye_y) / ry);
        if dx * dx + dy * dy <= 1.0 {
            let iris = (x - ex).powi(2) + (y - f.eye_y).powi(2) <= 16.0;
            return if iris { [0.08, 0.06, 0.05] } else { [0.92, 0.92, 0.9] };
        }
        // brows
        let by = f.brow_y - if class == 1 { t * LIFT } else { 0.0 };
        if (x - ex).abs() <= f.brow_half && (y - by).abs() <= LINE {
            return f.hair;
        }
    }
    // nose wrinkles fade in
    if class == 2 && (x - f.cx).abs() <= 10.0 && ((y - (f.eye_y + 3.0)).abs() <= 1.0 || (y - (f.eye_y + 9.0)).abs() <= 1.0) {
        return mix(f.skin, [0.25, 0.15, 0.12], t);
    }
    // nose ridge
    if (x - f.cx).abs() <= 1.5 && y > f.eye_y + 14.0 && y < f.mouth_y - 18.0 {
        return mix(f.skin, [0.0, 0.0, 0.0], 0.15);
    }
    f.skin
}

fn render(f: &Face, class: usize, t: f64, boxes: &[Rect], neutral: &[f64], noise: &[f64]) -> Tensor {
    let plane = SIZE * SIZE;
    let mut out = neutral.to_vec();
    for r in boxes {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let c = shade(f, class, t, x as f64 + 0.5, y as f64 + 0.5);
                for ch in 0..3 {
                    let i = ch * plane + y * SIZE + x;
                    out[i] = quantize(c[ch] + noise[i]);
                }
            }
        }
    }
    Tensor::new(vec![3, SIZE, SIZE], out).expect("fixed shape")
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render a dataset. Identical `(spec, seed)` give identical datasets.
pub fn synth_dataset(spec: SynthSpec, seed: u64) -> Result<Dataset> {
    if !(1..=MAX_CLASSES).contains(&spec.classes) {
        return Err(Error::Config(format!("synthetic data supports 1..={MAX_CLASSES} classes, got {}", spec.classes)));
    }
    let root = Rng::new(seed);
    let plane = SIZE * SIZE;
    let mut samples = Vec::new();
    for s in 0..spec.subjects {
        let face = Face::sample(&mut root.child(&[s as u64]));
        for class in 0..spec.classes {
            for k in 0..spec.samples_per {
                let mut rng = root.child(&[s as u64, class as u64, k as u64]);
                let noise: Vec<f64> = (0..3 * plane).map(|_| rng.normal() * NOISE_STD).collect();
                let mut neutral = vec![0.0; 3 * plane];
                for y in 0..SIZE {
                    for x in 0..SIZE {
                        let c = shade(&face, class, 0.0, x as f64 + 0.5, y as f64 + 0.5);
                        for ch in 0..3 {
                            let i = ch * plane + y * SIZE + x;
                            neutral[i] = quantize(c[ch] + noise[i]);
                        }
                    }
                }
                let boxes = regions(&face, class);
                let frame = |t: f64| render(&face, class, t, &boxes, &neutral, &noise);
                samples.push(SamplePair {
                    id: format!("s{s:02}_{}_{k}", CLASS_NAMES[class]),
                    subject: format!("s{s:02}"),
                    label: class,
                    canonical_onset: frame(0.0),
                    canonical_apex: frame(1.0),
                    onset_candidates: ONSET_INTENSITIES.iter().map(|&t| frame(t)).collect(),
                    apex_candidates: APEX_INTENSITIES.iter().map(|&t| frame(t)).collect(),
                    regions: boxes,
                });
            }
        }
    }
    let names = CLASS_NAMES[..spec.classes].iter().map(|s| s.to_string()).collect();
    Dataset::new(names, samples)
}
