//! IDX files (the MNIST container), optionally gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// An unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            message: "truncated header".into(),
        })
}

/// Decodes an IDX array whose magic must equal `expected`.
pub fn parse_idx(bytes: &[u8], expected: u32) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * k)? as usize);
    }
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let body = &bytes[start.min(bytes.len())..];
    if body.len() < len {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated data: {} of {len} bytes present", body.len()),
        });
    }
    if body.len() > len {
        return Err(Error::Format {
            offset: start + len,
            message: format!("{} trailing bytes", body.len() - len),
        });
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn read_idx(path: &Path, expected: u32) -> Result<IdxArray> {
    parse_idx(&read_bytes(path)?, expected)
}

/// Loads an image file and its label file; pixels are scaled by `1/255`
/// and each image becomes `[1, rows, cols]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images, IMAGES_MAGIC)?;
    let lab = read_idx(labels, LABELS_MAGIC)?;
    let (n, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {} labels", lab.dims[0]),
        });
    }
    if n == 0 {
        return Err(Error::Format {
            offset: 4,
            message: "no samples".into(),
        });
    }
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let inputs = Tensor::new(
        vec![n, 1, rows, cols],
        img.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, inputs, labels, num_classes)
}

/// Serializes an unsigned-byte IDX array (uncompressed).
pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&(0x0800u32 | array.dims.len() as u32).to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_idx(array))
        .map_err(|e| Error::io(path, e))
}
