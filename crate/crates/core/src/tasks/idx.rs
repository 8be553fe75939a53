//! IDX (MNIST) file ingestion. Big-endian headers; images are `u8` pixels
//! scaled to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::data::Dataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => format_err(
            bytes.len(),
            format!("truncated header: need 4 bytes at offset {offset}"),
        ),
    }
}

/// Parses an IDX image file: returns (count, rows, cols, pixels scaled to [0,1]).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return format_err(
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        );
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let expected = n * rows * cols;
    if body.len() < expected {
        return format_err(
            bytes.len(),
            format!(
                "truncated image data: header declares {n} images of {rows}x{cols} ({expected} bytes), found {}",
                body.len()
            ),
        );
    }
    if body.len() > expected {
        return format_err(
            16 + expected,
            format!("header count mismatch: {} trailing bytes", body.len() - expected),
        );
    }
    Ok((n, rows, cols, body.iter().map(|&p| p as f64 / 255.0).collect()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return format_err(
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        );
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return format_err(
            bytes.len(),
            format!("truncated labels: header declares {n}, found {}", body.len()),
        );
    }
    if body.len() > n {
        return format_err(
            8 + n,
            format!("header count mismatch: {} trailing bytes", body.len() - n),
        );
    }
    Ok(body.to_vec())
}

/// Builds a 10-class dataset from an image file and a label file.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return format_err(
            4,
            format!("header count mismatch: {n} images but {} labels", labels.len()),
        );
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    Dataset::classification(
        rows * cols,
        pixels,
        labels.into_iter().map(u32::from).collect(),
        classes,
    )
}
