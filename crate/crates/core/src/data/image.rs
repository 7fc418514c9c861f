//! Netpbm image I/O and the geometric helpers augmentation needs.
//!
//! Images live in memory as `[C,H,W]` tensors with values in `[0,1]`;
//! on disk they are binary PPM (`P6`, three channels) or PGM (`P5`, one
//! channel) with maxval 255. Writing quantizes with `round(v * 255)`, so an
//! 8-bit image survives a read/write cycle unchanged.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{dim_err, geom_err, Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c as char);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    Ok(tok)
}

fn parse_dim(tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Format(format!("bad netpbm dimension `{tok}`")))
}

/// Decode a P5 or P6 stream into `[1,H,W]` or `[3,H,W]`.
pub fn read_pnm(r: &mut impl BufRead) -> Result<Tensor> {
    let magic = read_token(r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported netpbm magic `{m}`"))),
    };
    let w = parse_dim(&read_token(r)?)?;
    let h = parse_dim(&read_token(r)?)?;
    let maxval = read_token(r)?;
    if maxval != "255" {
        return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    let mut raw = vec![0u8; w * h * channels];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("netpbm pixel data shorter than {w}x{h}x{channels}")))?;
    let plane = w * h;
    let mut data = vec![0.0; raw.len()];
    for (p, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = v as f64 / 255.0;
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Encode a `[1,H,W]` tensor as P5 or a `[3,H,W]` tensor as P6.
pub fn write_pnm(w: &mut impl Write, img: &Tensor) -> Result<()> {
    let &[c, h, wd] = img.shape() else {
        return Err(dim_err(format!("image must be [C,H,W], got {:?}", img.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(dim_err(format!("image must have 1 or 3 channels, got {c}"))),
    };
    write!(w, "{magic}\n{wd} {h}\n255\n")?;
    let d = img.data();
    let plane = h * wd;
    let mut raw = Vec::with_capacity(d.len());
    for p in 0..plane {
        for ch in 0..c {
            raw.push(quantize(d[ch * plane + p]));
        }
    }
    w.write_all(&raw)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_pnm(&mut std::io::BufReader::new(f))
}

pub fn save(path: &Path, img: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pnm(&mut f, img)?;
    f.flush()?;
    Ok(())
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(dim_err(format!("image must be [C,H,W], got {:?}", img.shape())));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(geom_err("resize target must be non-empty"));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// The `size x size` window whose top-left corner is `(y, x)`.
pub fn crop(img: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(dim_err(format!("image must be [C,H,W], got {:?}", img.shape())));
    };
    if y + size > h || x + size > w {
        return Err(geom_err(format!("crop {size}x{size} at ({y},{x}) exceeds {h}x{w}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for row in y..y + size {
            let base = (ch * h + row) * w;
            out.extend_from_slice(&d[base + x..base + x + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let w = *img.shape().last().unwrap();
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}
