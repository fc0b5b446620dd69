//! Reader for IDX image/label files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxFormat(format!("truncated header at byte {at}")))
}

/// Parses an image file into an n×(rows·cols) matrix with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Mat> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::IdxFormat(format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let width = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * width {
        return Err(Error::IdxFormat(format!("expected {} pixel bytes, found {}", n * width, body.len())));
    }
    Mat::from_vec(n, width, body.iter().map(|&p| f64::from(p) / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::IdxFormat(format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::IdxFormat(format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&l| usize::from(l)).collect())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Mat> {
    parse_idx_images(&fs::read(path)?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_idx_labels(&fs::read(path)?)
}

/// Serializes raw pixel bytes as an IDX image file.
pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_images_and_labels() {
        let bytes = encode_idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 0]);
        let m = parse_idx_images(&bytes).unwrap();
        assert_eq!(m.shape(), (2, 4));
        assert_eq!(m.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[3, 7, 0])).unwrap(), vec![3, 7, 0]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let labels = encode_idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&labels), Err(Error::IdxFormat(_))));
        let mut imgs = encode_idx_images(1, 2, 2, &[1, 2, 3, 4]);
        imgs.pop();
        assert!(matches!(parse_idx_images(&imgs), Err(Error::IdxFormat(_))));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::IdxFormat(_))));
    }
}
