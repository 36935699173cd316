//! IDX file format (the MNIST container): big-endian magic, big-endian
//! dimension sizes, raw unsigned-byte payload. Images use magic 0x00000803
//! (three dimensions), labels 0x00000801 (one dimension).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Element;

use super::Dataset;

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    let b: [u8; 4] = bytes
        .get(off..off + 4)
        .ok_or_else(|| Error::Format("idx header ends early".into()))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(b))
}

/// Parses an IDX image blob into (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != MAGIC_IMAGES {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {MAGIC_IMAGES:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let want = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "image payload holds {} bytes, header promises {want}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

/// Parses an IDX label blob.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != MAGIC_LABELS {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {MAGIC_LABELS:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "label payload holds {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::Data(format!(
            "{} pixels do not tile {rows}x{cols} images",
            pixels.len()
        )));
    }
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from parsed IDX blobs: pixels scaled to [0, 1], ten
/// classes. Shared by the file loader and the synthetic generator, so every
/// dataset passes through the same decoding path.
pub fn dataset_from_idx<E: Element>(
    name: &str,
    images: &[u8],
    labels: &[u8],
    classes: usize,
) -> Result<Dataset<E>> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let data: Vec<E> = pixels
        .iter()
        .map(|&p| E::from_f64(p as f64 / 255.0))
        .collect();
    Dataset::new(
        name,
        [1, rows, cols],
        data,
        labels.iter().map(|&l| l as usize).collect(),
        classes,
    )
}

/// Loads the MNIST pair of IDX files: N x 1 x 28 x 28 images in [0, 1].
pub fn load_mnist_idx<E: Element>(images_path: &Path, labels_path: &Path) -> Result<Dataset<E>> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    dataset_from_idx("mnist", &images, &labels, 10)
}
