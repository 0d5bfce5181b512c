//! Activations, pooling, batch normalization and the classification loss.

use super::{Scalar, Tensor};
use crate::error::{IdpError, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `dx = dy` where the forward input was positive, zero elsewhere.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(IdpError::dims("relu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Shape bookkeeping for pooling; the last two axes are pooled, all leading
/// axes are treated as independent planes.
#[derive(Clone, Debug)]
pub struct PoolCache {
    in_shape: Vec<usize>,
    /// Flat input index of the winner (max) for each output element.
    argmax: Vec<usize>,
    kernel: usize,
    stride: usize,
}

fn pool_dims(shape: &[usize], kernel: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    if shape.len() < 2 || kernel == 0 || stride == 0 {
        return Err(IdpError::config("pool", format!("cannot pool shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if kernel > h || kernel > w {
        return Err(IdpError::config(
            "pool",
            format!("window {kernel} larger than input {h}x{w}"),
        ));
    }
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
}

fn pooled_shape(shape: &[usize], oh: usize, ow: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = oh;
    s[n - 1] = ow;
    s
}

pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, PoolCache)> {
    let (planes, h, w, oh, ow) = pool_dims(x.shape(), kernel, stride)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let cache = PoolCache {
        in_shape: x.shape().to_vec(),
        argmax,
        kernel,
        stride,
    };
    Ok((Tensor::new(pooled_shape(x.shape(), oh, ow), out)?, cache))
}

pub fn maxpool2d_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.len() != cache.argmax.len() {
        return Err(IdpError::dims("maxpool2d_backward", dy.shape(), &cache.in_shape));
    }
    let mut dx = Tensor::zeros(&cache.in_shape);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, PoolCache)> {
    let (planes, h, w, oh, ow) = pool_dims(x.shape(), kernel, stride)?;
    let xd = x.data();
    let scale = T::one() / T::from_f64((kernel * kernel) as f64);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        acc += xd[base + (oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    let cache = PoolCache {
        in_shape: x.shape().to_vec(),
        argmax: Vec::new(),
        kernel,
        stride,
    };
    Ok((Tensor::new(pooled_shape(x.shape(), oh, ow), out)?, cache))
}

pub fn avgpool2d_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w, oh, ow) = pool_dims(&cache.in_shape, cache.kernel, cache.stride)?;
    if dy.len() != planes * oh * ow {
        return Err(IdpError::dims("avgpool2d_backward", dy.shape(), &cache.in_shape));
    }
    let (k, s) = (cache.kernel, cache.stride);
    let scale = T::one() / T::from_f64((k * k) as f64);
    let mut dx = Tensor::zeros(&cache.in_shape);
    let d = dx.data_mut();
    let g = dy.data();
    for pl in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[(pl * oh + oy) * ow + ox] * scale;
                for ky in 0..k {
                    for kx in 0..k {
                        d[pl * h * w + (oy * s + ky) * w + ox * s + kx] += v;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean softmax cross-entropy over a `B × C` batch of logits, with the
/// gradient of that mean. Softmax is stabilized by subtracting the row max.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(IdpError::dims("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(IdpError::argument(format!("label {bad} out of range for {c} classes")));
    }
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut grad = vec![T::zero(); b * c];
    let mut loss = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data()[s * c..(s + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        loss += (sum.ln() - (row[label] - max)).as_f64();
        for k in 0..c {
            let p = exps[k] / sum;
            let target = if k == label { T::one() } else { T::zero() };
            grad[s * c + k] = (p - target) * inv_b;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, c], grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    shape: Vec<usize>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    scale: Vec<T>,
    mode: BnMode,
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(IdpError::dims("batchnorm", shape, &[]));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel batch normalization over axis 1 of a `B × C × ...` tensor.
///
/// Train mode normalizes by the (biased) batch statistics and folds them into
/// `state` with the given momentum (unbiased variance, as is conventional). Eval mode
/// uses `state` and leaves it untouched.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    state: &mut BatchNormState<T>,
    mode: BnMode,
    momentum: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (b, c, inner) = bn_layout(x.shape())?;
    if scale.len() < c || shift.len() < c || state.mean.len() < c {
        return Err(IdpError::dims("batchnorm", x.shape(), &[scale.len()]));
    }
    let xd = x.data();
    let eps = T::from_f64(BN_EPS);
    let count = b * inner;
    let mut inv_std = vec![T::zero(); c];
    let mut x_hat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for ch in 0..c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = T::zero();
                for s in 0..b {
                    let base = (s * c + ch) * inner;
                    sum += xd[base..base + inner].iter().copied().sum::<T>();
                }
                let mean = sum / T::from_f64(count as f64);
                let mut sq = T::zero();
                for s in 0..b {
                    let base = (s * c + ch) * inner;
                    for &v in &xd[base..base + inner] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let var = sq / T::from_f64(count as f64);
                let m = T::from_f64(momentum);
                let unbiased = if count > 1 {
                    sq / T::from_f64((count - 1) as f64)
                } else {
                    var
                };
                state.mean[ch] = (T::one() - m) * state.mean[ch] + m * mean;
                state.var[ch] = (T::one() - m) * state.var[ch] + m * unbiased;
                (mean, var)
            }
            BnMode::Eval => (state.mean[ch], state.var[ch]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        for s in 0..b {
            let base = (s * c + ch) * inner;
            for t in base..base + inner {
                let h = (xd[t] - mean) * istd;
                x_hat[t] = h;
                out[t] = scale[ch] * h + shift[ch];
            }
        }
    }
    let cache = BatchNormCache {
        shape: x.shape().to_vec(),
        x_hat,
        inv_std,
        scale: scale[..c].to_vec(),
        mode,
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
}

/// Returns `(dx, dscale, dshift)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(IdpError::dims("batchnorm_backward", dy.shape(), &cache.shape));
    }
    let (b, c, inner) = bn_layout(&cache.shape)?;
    let g = dy.data();
    let n = T::from_f64((b * inner) as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for s in 0..b {
            let base = (s * c + ch) * inner;
            for (&gt, &xh) in g[base..base + inner].iter().zip(&cache.x_hat[base..base + inner]) {
                sum_g += gt;
                sum_gx += gt * xh;
            }
        }
        dshift[ch] = sum_g;
        dscale[ch] = sum_gx;
        let k = cache.scale[ch] * cache.inv_std[ch];
        for s in 0..b {
            let base = (s * c + ch) * inner;
            for t in base..base + inner {
                dx[t] = match cache.mode {
                    BnMode::Train => k * (g[t] - sum_g / n - cache.x_hat[t] * sum_gx / n),
                    BnMode::Eval => k * g[t],
                };
            }
        }
    }
    Ok((Tensor::new(cache.shape.clone(), dx)?, dscale, dshift))
}
