//! 2-D convolution, cross-correlation convention (the kernel is not flipped):
//!
//! `y[j, oy, ox] = Σ_i Σ_ky Σ_kx f[j, i, ky, kx] · x[i, oy·s + ky − pad, ox·s + kx − pad]`
//!
//! The direct loop is the reference. The im2col + GEMM path sums the same
//! terms in the same order `(i, ky, kx)` and is bit-identical to it.

use super::gemm::{gemm, gemm_nt, transpose};
use super::{Scalar, Tensor};
use crate::error::{IdpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bad = |msg: String| IdpError::config("conv2d", msg);
        if channels == 0 || kernel == 0 || stride == 0 {
            return Err(bad("channels, kernel and stride must be positive".into()));
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if kernel > ph || kernel > pw {
            return Err(bad(format!(
                "kernel {kernel} larger than padded input {ph}x{pw}"
            )));
        }
        if !(ph - kernel).is_multiple_of(stride) || !(pw - kernel).is_multiple_of(stride) {
            return Err(bad(format!(
                "output size not integral: ({height}+2*{pad}-{kernel})/{stride}"
            )));
        }
        Ok(Conv2dGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    /// Same geometry restricted to the first `channels` input channels.
    pub fn with_channels(&self, channels: usize) -> Self {
        Conv2dGeometry { channels, ..*self }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub(crate) fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }

    /// Outputs `o < out` whose tap `k` lands inside `0..extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        if extent + self.pad <= k {
            return lo..lo;
        }
        let hi = ((extent + self.pad - k - 1) / self.stride + 1).min(out);
        lo..hi.max(lo)
    }
}

/// Unfolds `batch` samples (each `channels × H × W`, samples `sample_stride`
/// apart) into a `patch_len × (batch · out_pixels)` matrix. Only the first
/// `geom.channels` channels of each sample are read.
pub fn im2col<T: Scalar>(x: &[T], batch: usize, sample_stride: usize, geom: &Conv2dGeometry) -> Vec<T> {
    let g = geom;
    let p = g.out_pixels();
    let cols_n = batch * p;
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    for ky in 0..g.kernel {
        let oys = g.valid(ky, g.height, g.out_h);
        for kx in 0..g.kernel {
            let oxs = g.valid(kx, g.width, g.out_w);
            if oxs.is_empty() {
                continue;
            }
            let ix0 = oxs.start * g.stride + kx - g.pad;
            for c in 0..g.channels {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                for s in 0..batch {
                    let plane = &x[s * sample_stride + c * g.in_pixels()..][..g.in_pixels()];
                    let dst = &mut cols[row * cols_n + s * p..][..p];
                    for oy in oys.clone() {
                        let src = &plane[(oy * g.stride + ky - g.pad) * g.width..][..g.width];
                        let out = &mut dst[oy * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            out[oxs.clone()].copy_from_slice(&src[ix0..ix0 + oxs.len()]);
                        } else {
                            for (o, ox) in oxs.clone().enumerate() {
                                out[ox] = src[ix0 + o * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into a
/// `batch × channels × H × W` buffer.
pub fn col2im<T: Scalar>(cols: &[T], batch: usize, geom: &Conv2dGeometry) -> Vec<T> {
    let g = geom;
    let p = g.out_pixels();
    let cols_n = batch * p;
    let per = g.channels * g.in_pixels();
    let mut x = vec![T::zero(); batch * per];
    for s in 0..batch {
        for c in 0..g.channels {
            let plane = &mut x[s * per + c * g.in_pixels()..][..g.in_pixels()];
            for ky in 0..g.kernel {
                let oys = g.valid(ky, g.height, g.out_h);
                for kx in 0..g.kernel {
                    let oxs = g.valid(kx, g.width, g.out_w);
                    if oxs.is_empty() {
                        continue;
                    }
                    let ix0 = oxs.start * g.stride + kx - g.pad;
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let src = &cols[row * cols_n + s * p..][..p];
                    for oy in oys.clone() {
                        let dst = &mut plane[(oy * g.stride + ky - g.pad) * g.width..][..g.width];
                        let from = &src[oy * g.out_w..][..g.out_w];
                        for (o, ox) in oxs.clone().enumerate() {
                            dst[ix0 + o * g.stride] += from[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Unfolded columns per GEMM call are capped near this many elements, so the
/// scratch buffers stay small and are reused across the sub-batches.
const CHUNK_ELEMS: usize = 1 << 21;

fn samples_per_chunk(geom: &Conv2dGeometry, batch: usize) -> usize {
    (CHUNK_ELEMS / (geom.patch_len() * geom.out_pixels()).max(1)).clamp(1, batch.max(1))
}

/// Batched forward through GEMM. `weights` is `m × patch_len` (row `j` holds
/// filter `j` flattened as `(i, ky, kx)`). Returns the `batch × m × out_pixels`
/// output.
pub(crate) fn conv_forward_batch<T: Scalar>(
    x: &[T],
    batch: usize,
    sample_stride: usize,
    geom: &Conv2dGeometry,
    weights: &[T],
    m: usize,
) -> Vec<T> {
    let p = geom.out_pixels();
    let mut y = vec![T::zero(); batch * m * p];
    let step = samples_per_chunk(geom, batch);
    let mut ymat = Vec::new();
    for s0 in (0..batch).step_by(step) {
        let nb = step.min(batch - s0);
        let cols = im2col(&x[s0 * sample_stride..], nb, sample_stride, geom);
        let n = nb * p;
        ymat.resize(m * n, T::zero());
        gemm(m, n, geom.patch_len(), weights, &cols, &mut ymat);
        for j in 0..m {
            for s in 0..nb {
                y[((s0 + s) * m + j) * p..][..p].copy_from_slice(&ymat[j * n + s * p..][..p]);
            }
        }
    }
    y
}

/// Batched backward through GEMM from the forward input `x`: returns
/// `(dx, dweights)` where `dx` is `batch × geom.channels × H × W` and
/// `dweights` is `m × patch_len`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_batch<T: Scalar>(
    x: &[T],
    batch: usize,
    sample_stride: usize,
    geom: &Conv2dGeometry,
    weights: &[T],
    m: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let p = geom.out_pixels();
    let kk = geom.patch_len();
    let per = geom.channels * geom.in_pixels();
    let w_t = transpose(m, kk, weights);
    let mut dx = vec![T::zero(); batch * per];
    let mut dw = vec![T::zero(); m * kk];
    let mut part = vec![T::zero(); m * kk];
    let (mut dymat, mut dcols) = (Vec::new(), Vec::new());
    let step = samples_per_chunk(geom, batch);
    for s0 in (0..batch).step_by(step) {
        let nb = step.min(batch - s0);
        let n = nb * p;
        dymat.resize(m * n, T::zero());
        for j in 0..m {
            for s in 0..nb {
                dymat[j * n + s * p..][..p].copy_from_slice(&dy[((s0 + s) * m + j) * p..][..p]);
            }
        }
        let cols = im2col(&x[s0 * sample_stride..], nb, sample_stride, geom);
        if s0 == 0 {
            gemm_nt(m, kk, n, &dymat, &cols, &mut dw);
        } else {
            gemm_nt(m, kk, n, &dymat, &cols, &mut part);
            dw.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
        }
        dcols.resize(kk * n, T::zero());
        gemm(kk, n, m, &w_t, &dymat, &mut dcols);
        dx[s0 * per..(s0 + nb) * per].copy_from_slice(&col2im(&dcols, nb, geom));
    }
    (dx, dw)
}

fn check_conv_args<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, stride: usize, pad: usize) -> Result<Conv2dGeometry> {
    if x.ndim() != 3 || f.ndim() != 4 || f.shape()[1] != x.shape()[0] || f.shape()[2] != f.shape()[3] {
        return Err(IdpError::dims("conv2d", x.shape(), f.shape()));
    }
    Conv2dGeometry::new(x.shape()[0], x.shape()[1], x.shape()[2], f.shape()[2], stride, pad)
}

/// Reference convolution by direct loops. Adds one to `macs` per visited
/// kernel tap, padded taps included.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    stride: usize,
    pad: usize,
    macs: &mut u64,
) -> Result<Tensor<T>> {
    let g = check_conv_args(x, f, stride, pad)?;
    let m = f.shape()[0];
    let (xd, fd) = (x.data(), f.data());
    let mut y = vec![T::zero(); m * g.out_pixels()];
    for j in 0..m {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                for i in 0..g.channels {
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            *macs += 1;
                            let (Some(iy), Some(ix)) =
                                (g.source(oy, ky, g.height), g.source(ox, kx, g.width))
                            else {
                                continue;
                            };
                            let w = fd[((j * g.channels + i) * g.kernel + ky) * g.kernel + kx];
                            acc += w * xd[(i * g.height + iy) * g.width + ix];
                        }
                    }
                }
                y[(j * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    Tensor::new(vec![m, g.out_h, g.out_w], y)
}

/// `x: N_in × H × W`, `f: M × N_in × k × k` → `M × H' × W'` via im2col + GEMM.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = check_conv_args(x, f, stride, pad)?;
    let m = f.shape()[0];
    let y = conv_forward_batch(x.data(), 1, x.len(), &g, f.data(), m);
    Tensor::new(vec![m, g.out_h, g.out_w], y)
}

/// Gradients of [`conv2d`] with respect to the input and the filters.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = check_conv_args(x, f, stride, pad)?;
    let m = f.shape()[0];
    if dy.shape() != [m, g.out_h, g.out_w] {
        return Err(IdpError::dims("conv2d_backward", dy.shape(), &[m, g.out_h, g.out_w]));
    }
    let (dx, dw) = conv_backward_batch(x.data(), 1, x.len(), &g, f.data(), m, dy.data());
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(f.shape().to_vec(), dw)?,
    ))
}
