//! Seeded geometric and pixel augmentations and the fixed pipelines built
//! from them.
//!
//! Every random draw for one image comes from a generator seeded by
//! `(master seed, image index, epoch)`, so an epoch can be replayed exactly
//! and images can be processed in any order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::seeded_rng;
use crate::tensor::Tensor;

/// A single `C×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(dim_err(format!(
                "{} values for a {channels}×{height}×{width} image",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        Tensor::new(vec![self.channels, self.height, self.width], self.data).expect("image shape")
    }

    /// Bilinear sample of channel `c` at a real-valued position; neighbours
    /// outside the image contribute 0.
    fn sample_zero(&self, c: usize, x: f64, y: f64) -> f32 {
        let x = snap(x);
        let y = snap(y);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let plane = self.plane(c);
        let px = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                plane[yi as usize * self.width + xi as usize] as f64
            }
        };
        let mut v = 0.0;
        if (1.0 - fx) * (1.0 - fy) > 0.0 {
            v += (1.0 - fx) * (1.0 - fy) * px(x0, y0);
        }
        if fx * (1.0 - fy) > 0.0 {
            v += fx * (1.0 - fy) * px(x0 + 1.0, y0);
        }
        if (1.0 - fx) * fy > 0.0 {
            v += (1.0 - fx) * fy * px(x0, y0 + 1.0);
        }
        if fx * fy > 0.0 {
            v += fx * fy * px(x0 + 1.0, y0 + 1.0);
        }
        v as f32
    }
}

/// Removes trigonometric round-off so exact lattice positions sample exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear resize with half-pixel centres (`align_corners = false`),
/// edge-clamped sampling and output clamped to `[0, 1]`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resize target {out_h}×{out_w} has a zero side")));
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, img.height);
    let xs = axis(out_w, img.width);
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        let p = img.plane(c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| p[y * img.width + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Image {
        channels: img.channels,
        height: out_h,
        width: out_w,
        data,
    })
}

/// Square crop at offsets `((H − size) / 2, (W − size) / 2)`.
pub fn center_crop(img: &Image, size: usize) -> Result<Image> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::Config(format!(
            "crop {size} does not fit a {}×{} image",
            img.height, img.width
        )));
    }
    let (oy, ox) = crop_offsets(img.height, img.width, size);
    let mut data = Vec::with_capacity(img.channels * size * size);
    for c in 0..img.channels {
        let p = img.plane(c);
        for y in oy..oy + size {
            data.extend_from_slice(&p[y * img.width + ox..y * img.width + ox + size]);
        }
    }
    Ok(Image {
        channels: img.channels,
        height: size,
        width: size,
        data,
    })
}

pub fn crop_offsets(height: usize, width: usize, size: usize) -> (usize, usize) {
    ((height - size) / 2, (width - size) / 2)
}

/// Rotates counter-clockwise (as displayed, y pointing down) by `degrees`
/// about the image centre, filling uncovered pixels with 0.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    warp(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

pub fn random_rotation(img: &Image, max_deg: f64, rng: &mut ChaCha8Rng) -> Image {
    if max_deg <= 0.0 {
        return img.clone();
    }
    rotate(img, rng.gen_range(-max_deg..=max_deg))
}

/// Inverse-mapped warp: `source(x, y)` gives the input position sampled for
/// output pixel `(x, y)`.
fn warp(img: &Image, source: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    let coords: Vec<(f64, f64)> = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x as f64, y as f64)))
        .map(|(x, y)| source(x, y))
        .collect();
    for c in 0..img.channels {
        data.extend(coords.iter().map(|&(sx, sy)| img.sample_zero(c, sx, sy).clamp(0.0, 1.0)));
    }
    Image {
        channels: img.channels,
        height: img.height,
        width: img.width,
        data,
    }
}

/// Homography `h` (row-major, `h[8] = 1`) with `h · src_i ∝ dst_i` for four
/// point pairs.
pub fn homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Config("degenerate perspective corners".into()));
        }
        a.swap(col, pivot);
        let pivot_row = a[col];
        for (row, r) in a.iter_mut().enumerate() {
            if row != col {
                let f = r[col] / pivot_row[col];
                for (x, p) in r[col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    Ok(h)
}

fn apply_homography(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

/// Warps the image so its corners move inward to `corners` (top-left,
/// top-right, bottom-right, bottom-left).
pub fn perspective(img: &Image, corners: &[(f64, f64); 4]) -> Result<Image> {
    let (w, h) = ((img.width - 1) as f64, (img.height - 1) as f64);
    let original = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let m = homography(corners, &original)?;
    Ok(warp(img, |x, y| apply_homography(&m, x, y)))
}

/// Each corner moves inward by up to `distortion · side / 2` along both axes.
pub fn random_perspective(img: &Image, distortion: f64, p: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    if !gate(p, rng) || distortion <= 0.0 {
        return Ok(img.clone());
    }
    let (w, h) = ((img.width - 1) as f64, (img.height - 1) as f64);
    let dx = distortion * img.width as f64 / 2.0;
    let dy = distortion * img.height as f64 / 2.0;
    let mut jitter = |limit: f64| if limit > 0.0 { rng.gen_range(0.0..=limit) } else { 0.0 };
    let corners = [
        (jitter(dx), jitter(dy)),
        (w - jitter(dx), jitter(dy)),
        (w - jitter(dx), h - jitter(dy)),
        (jitter(dx), h - jitter(dy)),
    ];
    perspective(img, &corners)
}

pub fn hflip(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks_exact(img.width) {
        data.extend(row.iter().rev());
    }
    Image { data, ..img.clone() }
}

pub fn random_hflip(img: &Image, p: f64, rng: &mut ChaCha8Rng) -> Image {
    if gate(p, rng) {
        hflip(img)
    } else {
        img.clone()
    }
}

/// Luma `0.299 R + 0.587 G + 0.114 B` written to all three channels;
/// single-channel images are already gray.
pub fn grayscale(img: &Image) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let n = img.height * img.width;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let luma: Vec<f32> = (0..n)
        .map(|i| {
            let y = 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64;
            y.clamp(0.0, 1.0) as f32
        })
        .collect();
    Image {
        data: luma.repeat(3),
        ..img.clone()
    }
}

pub fn random_grayscale(img: &Image, p: f64, rng: &mut ChaCha8Rng) -> Image {
    if gate(p, rng) {
        grayscale(img)
    } else {
        img.clone()
    }
}

/// Draws only when `p` is strictly between 0 and 1.
fn gate(p: f64, rng: &mut ChaCha8Rng) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.gen::<f64>() < p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AugmentOp {
    Resize { height: usize, width: usize },
    CenterCrop { size: usize },
    Rotate { max_deg: f64 },
    Perspective { distortion: f64 },
    HFlip,
    Grayscale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentStep {
    pub op: AugmentOp,
    pub p: f64,
}

impl AugmentStep {
    pub fn always(op: AugmentOp) -> Self {
        AugmentStep { op, p: 1.0 }
    }

    pub fn with_p(op: AugmentOp, p: f64) -> Self {
        AugmentStep { op, p }
    }

    fn is_random(&self) -> bool {
        !matches!(self.op, AugmentOp::Resize { .. } | AugmentOp::CenterCrop { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Covid,
}

/// Tunable parameters of the training pipelines.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams {
    pub resize: usize,
    pub rotation_deg: f64,
    pub perspective_distortion: f64,
    pub perspective_p: f64,
    pub hflip_p: f64,
    pub grayscale_p: f64,
    pub outer_crop: usize,
    pub inner_crop: usize,
}

impl PipelineParams {
    pub fn mnist() -> Self {
        PipelineParams {
            resize: 112,
            rotation_deg: 10.0,
            perspective_distortion: 0.5,
            perspective_p: 0.5,
            hflip_p: 0.0,
            grayscale_p: 0.0,
            outer_crop: 0,
            inner_crop: 0,
        }
    }

    pub fn covid() -> Self {
        PipelineParams {
            resize: 448,
            hflip_p: 0.5,
            grayscale_p: 0.1,
            outer_crop: 470,
            inner_crop: 448,
            ..Self::mnist()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub steps: Vec<AugmentStep>,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn identity(seed: u64) -> Self {
        AugmentSpec { steps: Vec::new(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.steps {
            if !(0.0..=1.0).contains(&s.p) {
                return Err(Error::Config(format!("probability {} outside [0, 1] in {:?}", s.p, s.op)));
            }
            match s.op {
                AugmentOp::Rotate { max_deg } if max_deg < 0.0 || !max_deg.is_finite() => {
                    return Err(Error::Config(format!("rotation bound {max_deg} must be finite and ≥ 0")))
                }
                AugmentOp::Perspective { distortion } if !(0.0..1.0).contains(&distortion) => {
                    return Err(Error::Config(format!("perspective distortion {distortion} outside [0, 1)")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// True when no step draws random numbers.
    pub fn is_deterministic(&self) -> bool {
        self.steps.iter().all(|s| !s.is_random() || s.p == 0.0)
    }

    pub fn rng_for(&self, index: u64, epoch: u64) -> ChaCha8Rng {
        seeded_rng(&[self.seed, index, epoch])
    }

    pub fn apply(&self, img: &Image, index: u64, epoch: u64) -> Result<Image> {
        let mut rng = self.rng_for(index, epoch);
        let mut out = img.clone();
        for step in &self.steps {
            out = match step.op {
                AugmentOp::Resize { height, width } => resize_bilinear(&out, height, width)?,
                AugmentOp::CenterCrop { size } => center_crop(&out, size)?,
                AugmentOp::Rotate { max_deg } => {
                    if gate(step.p, &mut rng) {
                        random_rotation(&out, max_deg, &mut rng)
                    } else {
                        out
                    }
                }
                AugmentOp::Perspective { distortion } => random_perspective(&out, distortion, step.p, &mut rng)?,
                AugmentOp::HFlip => random_hflip(&out, step.p, &mut rng),
                AugmentOp::Grayscale => random_grayscale(&out, step.p, &mut rng),
            };
        }
        Ok(out)
    }

    /// Augments rows `indices` of an `N×C×H×W` tensor into a new batch.
    pub fn apply_batch(&self, images: &Tensor<f32>, indices: &[usize], epoch: u64) -> Result<Tensor<f32>> {
        let &[_, c, h, w] = images.shape() else {
            return Err(dim_err(format!("expected N×C×H×W images, got {:?}", images.shape())));
        };
        let plane = c * h * w;
        let mut data = Vec::new();
        let mut out_shape = None;
        for &i in indices {
            let img = Image::new(c, h, w, images.data()[i * plane..(i + 1) * plane].to_vec())?;
            let out = self.apply(&img, i as u64, epoch)?;
            let shape = (out.channels, out.height, out.width);
            if *out_shape.get_or_insert(shape) != shape {
                return Err(dim_err("augmentation produced images of different sizes"));
            }
            data.extend(out.data);
        }
        let (oc, oh, ow) = out_shape.ok_or_else(|| Error::Data("empty batch".into()))?;
        Tensor::new(vec![indices.len(), oc, oh, ow], data)
    }

    /// Output `(C, H, W)` for an input of the given size.
    pub fn output_shape(&self, mut shape: (usize, usize, usize)) -> (usize, usize, usize) {
        for s in &self.steps {
            match s.op {
                AugmentOp::Resize { height, width } => shape = (shape.0, height, width),
                AugmentOp::CenterCrop { size } => shape = (shape.0, size, size),
                _ => {}
            }
        }
        shape
    }
}

/// Resize, rotate, then perspective.
pub fn mnist_train_pipeline(seed: u64) -> AugmentSpec {
    mnist_train_with(seed, &PipelineParams::mnist())
}

pub fn mnist_train_with(seed: u64, p: &PipelineParams) -> AugmentSpec {
    AugmentSpec {
        steps: vec![
            AugmentStep::always(AugmentOp::Resize {
                height: p.resize,
                width: p.resize,
            }),
            AugmentStep::always(AugmentOp::Rotate { max_deg: p.rotation_deg }),
            AugmentStep::with_p(
                AugmentOp::Perspective {
                    distortion: p.perspective_distortion,
                },
                p.perspective_p,
            ),
        ],
        seed,
    }
}

/// Outer crop, rotation, perspective, flip, grayscale, inner crop.
pub fn covid_train_pipeline(seed: u64) -> AugmentSpec {
    covid_train_with(seed, &PipelineParams::covid())
}

pub fn covid_train_with(seed: u64, p: &PipelineParams) -> AugmentSpec {
    AugmentSpec {
        steps: vec![
            AugmentStep::always(AugmentOp::CenterCrop { size: p.outer_crop }),
            AugmentStep::always(AugmentOp::Rotate { max_deg: p.rotation_deg }),
            AugmentStep::with_p(
                AugmentOp::Perspective {
                    distortion: p.perspective_distortion,
                },
                p.perspective_p,
            ),
            AugmentStep::with_p(AugmentOp::HFlip, p.hflip_p),
            AugmentStep::with_p(AugmentOp::Grayscale, p.grayscale_p),
            AugmentStep::always(AugmentOp::CenterCrop { size: p.inner_crop }),
        ],
        seed,
    }
}

pub fn eval_pipeline(kind: DatasetKind) -> AugmentSpec {
    let size = match kind {
        DatasetKind::Mnist => PipelineParams::mnist().resize,
        DatasetKind::Covid => PipelineParams::covid().resize,
    };
    eval_resize(size)
}

pub fn eval_resize(size: usize) -> AugmentSpec {
    AugmentSpec {
        steps: vec![AugmentStep::always(AugmentOp::Resize {
            height: size,
            width: size,
        })],
        seed: 0,
    }
}
