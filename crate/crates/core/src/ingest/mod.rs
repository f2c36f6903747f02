//! Dataset readers and deterministic splitting.

mod dicom;
mod idx;

pub use dicom::{
    decode_pgm16, dicom_to_rgb, encode_minimal_dicom, encode_pgm16, parse_dicom_bytes, parse_minimal_dicom, read_pgm16,
    sobel, RawGray16, DICOM_OUTPUT_SIZE, EXPLICIT_VR_LITTLE_ENDIAN,
};
pub use idx::{decode_idx_images, decode_idx_labels, encode_idx_images, encode_idx_labels, load_idx};

use rand::seq::SliceRandom;

use crate::error::{dim_err, Error, Result};
use crate::layers::seeded_rng;
use crate::tensor::Tensor;

/// Images with class labels. Pixel values lie in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(dim_err(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!("label {bad} with only {} classes", class_names.len())));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(C, H, W)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("subset selects no images".into()));
        }
        let (c, h, w) = self.image_shape();
        let plane = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("index {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        Self::new(Tensor::new(vec![indices.len(), c, h, w], data)?, labels, self.class_names.clone())
    }

    /// The first `n` images, or all of them when `n` is larger.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Keeps only the listed classes and renumbers them `0..keep.len()` in
    /// the listed order.
    pub fn filter_classes(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::Config(format!("class {bad} not present (have {})", self.classes())));
        }
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        let mut out = self.subset(&rows)?;
        for l in &mut out.labels {
            *l = keep.iter().position(|k| k == l).unwrap();
        }
        out.class_names = keep.iter().map(|&k| self.class_names[k].clone()).collect();
        Ok(out)
    }
}

/// Seeded shuffle of `0..n` split at `floor(fraction · n)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie strictly between 0 and 1")));
    }
    let cut = (fraction * n as f64).floor() as usize;
    if n < 2 || cut == 0 || cut == n {
        return Err(Error::Data(format!("cannot split {n} samples at fraction {fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(&[seed, 0x5350_4c54]));
    let tail = idx.split_off(cut);
    Ok((idx, tail))
}

pub fn split_train_val(set: &LabeledImageSet, fraction: f64, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (a, b) = split_indices(set.len(), fraction, seed)?;
    Ok((set.subset(&a)?, set.subset(&b)?))
}

/// Train/validation/test partition with the given leading fractions; the
/// test part receives the remainder.
pub fn split_three(
    set: &LabeledImageSet,
    train: f64,
    val: f64,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
        return Err(Error::Config(format!("fractions {train} and {val} leave no test part")));
    }
    let (head, test) = split_indices(set.len(), train + val, seed)?;
    let n_train = (train * set.len() as f64).floor() as usize;
    if n_train == 0 || n_train >= head.len() {
        return Err(Error::Data(format!("cannot split {} samples three ways", set.len())));
    }
    Ok((
        set.subset(&head[..n_train])?,
        set.subset(&head[n_train..])?,
        set.subset(&test)?,
    ))
}
