//! IDX files: big-endian `u32` magic, one big-endian `u32` per dimension,
//! then a `u8` payload.

use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// `(n, rows, cols, pixels)`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "IDX images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("IDX images magic {magic}, expected {IMAGES_MAGIC}")));
    }
    let n = be_u32(bytes, 4, "IDX images")? as usize;
    let rows = be_u32(bytes, 8, "IDX images")? as usize;
    let cols = be_u32(bytes, 12, "IDX images")? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX images payload has {} bytes, header implies {}",
            payload.len(),
            n * rows * cols
        )));
    }
    Ok((n, rows, cols, payload))
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "IDX labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("IDX labels magic {magic}, expected {LABELS_MAGIC}")));
    }
    let n = be_u32(bytes, 4, "IDX labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!("IDX labels payload has {} bytes, header implies {n}", payload.len())));
    }
    Ok(payload)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads an image/label file pair as single-channel images scaled by 1/255.
/// Classes are named `"0"`..`"max label"`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let ib = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lb = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    from_idx_bytes(&ib, &lb)
}

pub(crate) fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet> {
    let (n, rows, cols, pixels) = decode_idx_images(images)?;
    let labels = decode_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data("IDX file holds no images".into()));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    LabeledImageSet::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels.iter().map(|&l| l as usize).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_scaling() {
        let pixels = [0u8, 255, 128, 1, 2, 3, 4, 5];
        let set = from_idx_bytes(&encode_idx_images(2, 2, 2, &pixels), &encode_idx_labels(&[3, 1])).unwrap();
        assert_eq!(set.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(set.images.data()[1], 1.0);
        assert_eq!(set.images.data()[0], 0.0);
        assert_eq!(set.labels, vec![3, 1]);
        assert_eq!(set.classes(), 4);
    }

    #[test]
    fn format_errors() {
        let imgs = encode_idx_images(2, 2, 2, &[0; 8]);
        let labels = encode_idx_labels(&[0, 1]);
        assert!(matches!(from_idx_bytes(&imgs[..20], &labels), Err(Error::Format(_))));
        assert!(matches!(from_idx_bytes(&labels, &labels), Err(Error::Format(_))));
        assert!(matches!(from_idx_bytes(&imgs, &encode_idx_labels(&[0])), Err(Error::Format(_))));
        assert!(matches!(from_idx_bytes(&imgs[..10], &labels), Err(Error::Format(_))));
    }
}
