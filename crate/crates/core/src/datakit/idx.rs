//! IDX files as shipped with MNIST-family datasets.
//!
//! Header: a big-endian `u32` magic (`0x00000803` for `u8` images of rank 3,
//! `0x00000801` for `u8` labels of rank 1), then one big-endian `u32` per
//! dimension, then the unsigned byte payload.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Parses an IDX buffer; returns dims and the byte payload.
fn parse(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != need {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, header promises {need}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Builds a dataset from in-memory IDX image and label files.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = parse(images, IMAGES_MAGIC)?;
    let (ldims, lbytes) = parse(labels, LABELS_MAGIC)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(Error::Consistency(format!("{n} images but {} labels", ldims[0])));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Consistency("IDX files contain no samples".into()));
    }
    let x = Tensor::new(
        vec![n, rows * cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let y: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(x, y, classes)?.with_image_shape(rows, cols)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&ib, &lb)
}
