//! Reader for the IDX files MNIST ships in.
//!
//! Layout: big-endian `u32` magic (`0x00000803` images, `0x00000801` labels),
//! one big-endian `u32` per dimension, then the raw `u8` payload.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxFile {
    /// Pixels scaled to `[0, 1]`, one flattened image per row.
    Images(Array2<f64>),
    Labels(Vec<u8>),
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxFile> {
    parse_idx(&fs::read(path)?)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let magic = be_u32(bytes, 0)?;
    let ndims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        found => {
            return Err(Error::BadMagic {
                expected: IMAGES_MAGIC,
                found,
            })
        }
    };
    let dims: Vec<usize> = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let header = 4 + 4 * ndims;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::DimOverflow)?;
    let payload = &bytes[header..];
    if payload.len() < len {
        return Err(Error::TruncatedFile {
            expected: len,
            found: payload.len(),
        });
    }
    let payload = &payload[..len];
    if magic == LABELS_MAGIC {
        return Ok(IdxFile::Labels(payload.to_vec()));
    }
    let pixels = dims[1].checked_mul(dims[2]).ok_or(Error::DimOverflow)?;
    let data: Vec<f64> = payload.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Array2::from_shape_vec((dims[0], pixels), data).map_err(|_| Error::DimOverflow)?;
    Ok(IdxFile::Images(images))
}

/// Pairs an image file with its label file.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let IdxFile::Images(x) = load_idx(images)? else {
        return Err(Error::BadConfig("image path holds a label file".into()));
    };
    let IdxFile::Labels(y) = load_idx(labels)? else {
        return Err(Error::BadConfig("label path holds an image file".into()));
    };
    Dataset::new(x, y.into_iter().map(usize::from).collect())
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(Error::TruncatedFile {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Encodes an IDX image file; used to build fixtures.
pub fn encode_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
