//! Binary PGM/PPM dumps. Values are clamped to `[0, 1]` and scaled to 8 bits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[1, h, w]` as P5 or `[3, h, w]` as P6.
pub fn encode_image(channels: usize, height: usize, width: usize, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != channels * height * width {
        return Err(Error::shape(format!(
            "{} values for a {channels}x{height}x{width} image",
            data.len()
        )));
    }
    let tag = match channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::shape(format!(
                "images need 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{tag}\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                out.push(to_byte(data[(c * height + y) * width + x]));
            }
        }
    }
    Ok(out)
}

/// Lays a `[b, c, h, w]` batch out in one row with a one-pixel gap.
pub fn grid(batch: &Tensor) -> Result<(usize, usize, usize, Vec<f64>)> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "image grid needs [b, c, h, w], got {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let gw = b * w + (b - 1);
    let mut out = vec![1.0; c * h * gw];
    let d = batch.data();
    for i in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * gw + i * (w + 1) + x] = d[((i * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    Ok((c, h, gw, out))
}

pub fn write_grid(path: &Path, batch: &Tensor) -> Result<()> {
    let (c, h, w, data) = grid(batch)?;
    fs::write(path, encode_image(c, h, w, &data)?).map_err(|e| Error::io(path, e))
}
