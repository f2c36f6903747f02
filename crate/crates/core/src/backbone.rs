//! Convolutional feature extractor and the precomputed-feature import path.
//!
//! The backbone is a stack of `conv3×3 (pad 1) → ReLU → maxpool 2×2` stages
//! followed by a flatten. Frozen backbones hold no trainable tensors, so the
//! tape records them as constants and their gradients are never computed.
//!
//! Feature files (`FTNS`) carry `N×D` feature rows plus labels so a head can
//! be trained on features exported from any external model:
//!
//! ```text
//! "FTNS" | u32 version=1 | u32 N | u32 D | u32 dtype (0=f32, 1=f64)
//! N·D little-endian scalars | N little-endian u16 labels
//! ```

use std::fs;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::layers::{seeded_rng, uniform_fan_in, Parameterized};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Scalar, Tensor};

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniCnnConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl MiniCnnConfig {
    /// Single-channel 28×28 input with stages of 16 and 32 filters.
    pub fn mnist() -> Self {
        MiniCnnConfig {
            in_channels: 1,
            widths: vec![16, 32],
            height: 28,
            width: 28,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs positive channel counts, got in={} widths={:?}",
                self.in_channels, self.widths
            )));
        }
        let div = 1usize << self.widths.len();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input {}×{} is not divisible by 2^{} pooling stages",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// `last_width · (H / 2^stages) · (W / 2^stages)`
    pub fn feature_dim(&self) -> usize {
        let div = 1usize << self.widths.len();
        self.widths.last().copied().unwrap_or(0) * (self.height / div) * (self.width / div)
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T: Scalar> {
    config: MiniCnnConfig,
    stages: Vec<ConvStage<T>>,
}

impl<T: Scalar> Backbone<T> {
    fn build(config: MiniCnnConfig, mut weight: impl FnMut(&[usize], usize) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut channels = config.in_channels;
        for &filters in &config.widths {
            let shape = [filters, channels, KERNEL, KERNEL];
            stages.push(ConvStage {
                weight: weight(&shape, channels * KERNEL * KERNEL),
                bias: Tensor::zeros(&[filters]).with_requires_grad(true),
            });
            channels = filters;
        }
        Ok(Backbone { config, stages })
    }

    /// Weights uniform in ±1/√fan_in (fan_in = C·3·3), biases zero.
    pub fn init(config: MiniCnnConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(&[seed, 0x4243_4e4e]);
        Self::build(config, |shape, fan_in| uniform_fan_in(shape, fan_in, &mut rng))
    }

    pub fn zeros(config: MiniCnnConfig) -> Result<Self> {
        Self::build(config, |shape, _| Tensor::zeros(shape).with_requires_grad(true))
    }

    pub fn config(&self) -> &MiniCnnConfig {
        &self.config
    }

    pub fn stages(&self) -> &[ConvStage<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [ConvStage<T>] {
        &mut self.stages
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Stops gradient flow into every backbone tensor. Idempotent.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.set_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        let mut any = false;
        self.visit_params(&mut |_, t| any |= t.requires_grad());
        !any
    }

    /// `N×C×H×W` images to `N×D` features.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let c = &self.config;
        match tape.shape(images) {
            [_, ch, h, w] if *ch == c.in_channels && *h == c.height && *w == c.width => {}
            other => {
                return Err(dim_err(format!(
                    "backbone expects N×{}×{}×{} images, got {other:?}",
                    c.in_channels, c.height, c.width
                )))
            }
        }
        let mut x = images;
        for stage in &self.stages {
            let w = tape.leaf(&stage.weight);
            let b = tape.leaf(&stage.bias);
            x = tape.conv2d(x, w, 1, PADDING)?;
            x = tape.add_bias(x, b)?;
            x = tape.relu(x)?;
            x = tape.maxpool2(x)?;
        }
        tape.flatten(x)
    }

    /// Rebuilds a backbone of shape `config` from named tensors.
    pub fn from_named(config: MiniCnnConfig, lookup: &dyn Fn(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let mut bb = Self::zeros(config)?;
        let mut problems = Vec::new();
        bb.visit_params_mut(&mut |name, slot| match lookup(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t.with_requires_grad(true),
            Some(t) => problems.push(format!("{name} (expected {:?}, found {:?})", slot.shape(), t.shape())),
            None => problems.push(format!("{name} (missing)")),
        });
        if problems.is_empty() {
            Ok(bb)
        } else {
            Err(Error::Transfer(format!("backbone tensors do not match: {}", problems.join(", "))))
        }
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("backbone.conv{i}.weight"), &s.weight);
            f(&format!("backbone.conv{i}.bias"), &s.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("backbone.conv{i}.weight"), &mut s.weight);
            f(&format!("backbone.conv{i}.bias"), &mut s.bias);
        }
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"FTNS";
const FEATURE_VERSION: u32 = 1;

/// Features with one label per row.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Writes a feature file from `N×D` row-major scalars.
pub fn encode_feature_file<T: Scalar>(features: &[T], dim: usize, labels: &[usize]) -> Result<Vec<u8>> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(dim_err(format!(
            "{} feature scalars do not form {} rows of width {dim}",
            features.len(),
            labels.len()
        )));
    }
    let n = u32::try_from(labels.len()).map_err(|_| Error::Data("too many rows".into()))?;
    let mut out = Vec::with_capacity(20 + features.len() * T::DTYPE.size() + labels.len() * 2);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&u32::from(T::DTYPE.code()).to_le_bytes());
    for v in features {
        v.write_le(&mut out);
    }
    for &l in labels {
        let l = u16::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in u16")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn save_feature_file<T: Scalar>(path: &Path, features: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(dim_err(format!(
            "features {:?} with {} labels",
            features.shape(),
            labels.len()
        )));
    }
    let bytes = encode_feature_file(features.data(), features.shape()[1], labels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_feature_file(bytes: &[u8]) -> Result<FeatureSet> {
    let header = bytes
        .get(..20)
        .ok_or_else(|| Error::Format("feature file shorter than its 20-byte header".into()))?;
    if &header[..4] != FEATURE_MAGIC {
        return Err(Error::Format("feature file magic is not FTNS".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("feature file version {version}, expected {FEATURE_VERSION}")));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let dtype = u8::try_from(word(16))
        .ok()
        .and_then(DType::from_code)
        .ok_or_else(|| Error::Format(format!("unknown feature dtype code {}", word(16))))?;
    if n == 0 {
        return Err(Error::Data("feature file holds an empty dataset (N=0)".into()));
    }
    if d == 0 {
        return Err(Error::Format("feature width D=0".into()));
    }
    let payload = n * d * dtype.size();
    let expected = 20 + payload + 2 * n;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "feature file has {} bytes, header (N={n}, D={d}, {}) implies {expected}",
            bytes.len(),
            dtype.name()
        )));
    }
    let body = &bytes[20..20 + payload];
    let features: Vec<f32> = match dtype {
        DType::F32 => body.chunks_exact(4).map(f32::read_le).collect(),
        DType::F64 => body.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
    };
    let labels = bytes[20 + payload..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    Ok(FeatureSet {
        features: Tensor::new(vec![n, d], features)?,
        labels,
    })
}

pub fn load_feature_file(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes)
}
