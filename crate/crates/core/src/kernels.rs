//! Raw numeric kernels behind the taped operations.
//!
//! Convolution is cross-correlation over NCHW buffers. [`conv2d_direct`] is
//! the reference definition; the im2col + GEMM path used for training must
//! agree with it to rounding error.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Static shape information of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects N×C×H×W input and F×C×kh×kw kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {input:?}, kernel {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh > h || kw > w {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {h}×{w}"
            )));
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    /// Source coordinate for output position `o` and kernel tap `k`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Reference cross-correlation, one output element at a time.
pub fn conv2d_direct<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.filters * g.out_plane()];
    for n in 0..g.batch {
        for f in 0..g.filters {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.source(oy, ky, g.height) else { continue };
                            for kx in 0..g.kernel_w {
                                let Some(ix) = g.source(ox, kx, g.width) else { continue };
                                let x = input[((n * g.in_channels + c) * g.height + iy) * g.width + ix];
                                let k = kernel[((f * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                                acc = acc + x * k;
                            }
                        }
                    }
                    out[((n * g.filters + f) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Unfolds the batch into a `patch_len × (N·H'·W')` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let cols_per_row = g.batch * plane;
    let mut cols = vec![T::zero(); g.patch_len() * cols_per_row];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ky, g.height) else { continue };
                        let src_row = &src[iy * g.width..(iy + 1) * g.width];
                        let dst_out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, d) in dst_out.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let cols_per_row = g.batch * plane;
    let mut grad = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                for n in 0..g.batch {
                    let dst = &mut grad[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ky, g.height) else { continue };
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                let d = &mut dst[iy * g.width + ix];
                                *d = *d + src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    grad
}

/// `[F × N·P]` (filter-major) to `[N × F × P]` (batch-major).
pub fn filter_major_to_batch_major<T: Scalar>(src: &[T], filters: usize, batch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for f in 0..filters {
        for n in 0..batch {
            out[(n * filters + f) * plane..][..plane].copy_from_slice(&src[(f * batch + n) * plane..][..plane]);
        }
    }
    out
}

/// Inverse of [`filter_major_to_batch_major`].
pub fn batch_major_to_filter_major<T: Scalar>(src: &[T], filters: usize, batch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..batch {
        for f in 0..filters {
            out[(f * batch + n) * plane..][..plane].copy_from_slice(&src[(n * filters + f) * plane..][..plane]);
        }
    }
    out
}

/// Forward convolution through im2col + GEMM. Returns the output and the
/// unfolded patches (needed for the kernel gradient).
pub fn conv2d_gemm<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, input);
    let k = g.patch_len();
    let np = g.batch * g.out_plane();
    let mut out_fm = vec![T::zero(); g.filters * np];
    T::gemm(
        g.filters,
        k,
        np,
        kernel,
        (k as isize, 1),
        &cols,
        (np as isize, 1),
        T::zero(),
        &mut out_fm,
        (np as isize, 1),
    );
    let out = filter_major_to_batch_major(&out_fm, g.filters, g.batch, g.out_plane());
    (out, cols)
}

/// Row-major `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
    out
}

/// 2×2 max pooling with stride 2. Returns pooled values and, for every
/// output, the flat input index that won (first maximum in scan order).
pub fn maxpool2<T: Scalar>(input: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}
