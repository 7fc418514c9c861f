//! Attention-map rendering: 8-bit grayscale maps and red overlays on the apex frame.
//!
//! Maps are min-max normalized. A constant map has no range and is written
//! as all zeros; [`normalize`] reports that case so callers can flag it.

use std::path::{Path, PathBuf};

use crate::data::dataset::Rect;
use crate::data::image;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Min-max normalize to `[0,1]`. Returns `true` when the map is constant.
pub fn normalize(map: &Tensor) -> (Tensor, bool) {
    let d = map.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return (map.map(|_| 0.0), true);
    }
    (map.map(|v| (v - lo) / (hi - lo)), false)
}

/// Nearest-neighbour upsampling of a `[1,h,w]` map to `[1,size,size]`.
pub fn upsample_nearest(map: &Tensor, size: usize) -> Result<Tensor> {
    let &[1, h, w] = map.shape() else {
        return Err(dim_err(format!("attention map must be [1,H,W], got {:?}", map.shape())));
    };
    let d = map.data();
    Tensor::from_fn(vec![1, size, size], |i| {
        let (y, x) = (i / size, i % size);
        d[(y * h / size) * w + x * w / size]
    })
}

/// Blend a `[1,S,S]` map in `[0,1]` into the red channel of a `[3,S,S]` frame.
pub fn overlay(frame: &Tensor, map: &Tensor) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 || map.shape() != [1, s[1], s[2]] {
        return Err(dim_err(format!("cannot overlay {:?} on {:?}", map.shape(), s)));
    }
    let plane = s[1] * s[2];
    let m = map.data();
    let f = frame.data();
    Tensor::from_fn(s.to_vec(), |i| {
        let keep = (1.0 - OVERLAY_ALPHA) * f[i];
        if i < plane {
            keep + OVERLAY_ALPHA * m[i]
        } else {
            keep
        }
    })
}

/// Files written by [`export_maps`].
#[derive(Clone, Debug, Default)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    /// Blocks whose map was constant.
    pub constant_maps: Vec<usize>,
}

/// Write `attn_block{i}.pgm` and `overlay_block{i}.ppm` for each map (blocks
/// numbered from 1) into `dir`.
pub fn export_maps(dir: &Path, maps: &[Tensor], apex: &Tensor) -> Result<ExportSummary> {
    std::fs::create_dir_all(dir)?;
    let size = apex.shape().get(1).copied().unwrap_or(0);
    let mut out = ExportSummary::default();
    for (i, map) in maps.iter().enumerate() {
        let block = i + 1;
        let (norm, constant) = normalize(map);
        if constant {
            out.constant_maps.push(block);
        }
        let gray = dir.join(format!("attn_block{block}.pgm"));
        image::save(&gray, &norm)?;
        let over = dir.join(format!("overlay_block{block}.ppm"));
        image::save(&over, &overlay(apex, &upsample_nearest(&norm, size)?)?)?;
        out.files.extend([gray, over]);
    }
    Ok(out)
}

/// Whether any of the top 10% of `map` pixels (ties broken by lower index)
/// falls inside `regions`. Map pixel `(y, x)` covers region pixels
/// `[x*scale, (x+1)*scale) + offset` horizontally, likewise vertically.
pub fn top_decile_hits(map: &Tensor, regions: &[Rect], scale: usize, offset: usize) -> bool {
    let &[_, _, w] = map.shape() else { return false };
    let d = map.data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    order[..(d.len() / 10).max(1)].iter().any(|&i| {
        let (y, x) = (i / w, i % w);
        (0..scale).any(|dy| {
            (0..scale).any(|dx| {
                let (sy, sx) = (y * scale + dy + offset, x * scale + dx + offset);
                regions.iter().any(|r| r.contains(sx, sy))
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_zero_and_flagged() {
        let (n, c) = normalize(&Tensor::full(vec![1, 4, 4], 0.3).unwrap());
        assert!(c);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_spans_unit_interval() {
        let (n, c) = normalize(&Tensor::new(vec![1, 1, 3], vec![2.0, 4.0, 3.0]).unwrap());
        assert!(!c);
        assert_eq!(n.data(), [0.0, 1.0, 0.5]);
    }

    #[test]
    fn nearest_upsample_replicates_cells() {
        let m = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = upsample_nearest(&m, 4).unwrap();
        assert_eq!(u.data(), [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn overlay_blends_red_only() {
        let f = Tensor::full(vec![3, 2, 2], 0.4).unwrap();
        let m = Tensor::full(vec![1, 2, 2], 1.0).unwrap();
        let o = overlay(&f, &m).unwrap();
        assert_eq!(&o.data()[..4], [0.7; 4]);
        assert_eq!(&o.data()[4..], [0.2; 8]);
    }

    #[test]
    fn top_decile_localization() {
        let mut m = Tensor::zeros(vec![1, 10, 10]).unwrap();
        m.data_mut()[5 * 10 + 7] = 1.0;
        let hit = Rect { x0: 14, y0: 10, x1: 16, y1: 12 };
        let miss = Rect { x0: 0, y0: 16, x1: 4, y1: 20 };
        assert!(top_decile_hits(&m, &[hit], 2, 0));
        assert!(!top_decile_hits(&m, &[miss], 2, 0));
    }
}
