use rand::Rng;

use super::{check_active, effective, gamma_as, straight_through, Param, ParamLayout, Pass, UpdateMask};
use crate::error::{IdpError, Result};
use crate::profiles::ProfileCoefficients;
use crate::tensor::conv::{conv_backward_batch, conv_forward_batch};
use crate::tensor::{conv2d_direct, Conv2dGeometry, Scalar, Tensor};

/// Incomplete 2-D convolution over `B × C × H × W` inputs.
///
/// Filter `j` sees only the first `k_in` input channels, each scaled by its
/// profile coefficient; only the first `k_out` filters are evaluated.
#[derive(Clone, Debug)]
pub struct IncompleteConv2d<T> {
    /// `outputs × inputs × k × k`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub gamma: Option<ProfileCoefficients>,
    pub binary: bool,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    inputs: usize,
    outputs: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    x: Vec<T>,
    batch: usize,
    channels: usize,
    geom: Conv2dGeometry,
    k_out: usize,
    w_eff: Vec<T>,
}

impl<T: Scalar> IncompleteConv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gamma: Option<ProfileCoefficients>,
        binary: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kk = kernel * kernel;
        let layout = ParamLayout::Weight { out: outputs, inn: inputs, inner: kk };
        let mut weight = Param::he_normal(vec![outputs, inputs, kernel, kernel], inputs * kk, layout, rng);
        if binary {
            weight.clip = Some(1.0);
        }
        let bias = Param::filled(vec![outputs], T::zero(), ParamLayout::PerOutput, false);
        Self::from_parts(weight, bias, stride, pad, gamma, binary)
    }

    pub fn from_parts(
        weight: Param<T>,
        bias: Param<T>,
        stride: usize,
        pad: usize,
        gamma: Option<ProfileCoefficients>,
        binary: bool,
    ) -> Result<Self> {
        let s = &weight.shape;
        if s.len() != 4 || s[2] != s[3] || bias.shape != [s[0]] {
            return Err(IdpError::dims("IncompleteConv2d", s, &bias.shape));
        }
        let (outputs, inputs, kernel) = (s[0], s[1], s[2]);
        if let Some(g) = &gamma {
            if g.len() != inputs {
                return Err(IdpError::dims("IncompleteConv2d profile", &[g.len()], &[inputs]));
            }
        }
        if stride == 0 {
            return Err(IdpError::config("conv", "stride must be positive"));
        }
        Ok(IncompleteConv2d {
            weight,
            bias,
            gamma,
            binary,
            kernel,
            stride,
            pad,
            inputs,
            outputs,
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn geometry(&self, k_in: usize, h: usize, w: usize) -> Result<Conv2dGeometry> {
        Conv2dGeometry::new(k_in, h, w, self.kernel, self.stride, self.pad)
    }

    /// Multiply-accumulates for one sample: `k_out · k_in · k² · H' · W'`.
    pub fn macs(&self, k_in: usize, k_out: usize, out_h: usize, out_w: usize) -> u64 {
        (k_out * k_in * self.kernel * self.kernel * out_h * out_w) as u64
    }

    /// `k_out × (k_in·k·k)` effective filters, rows flattened as `(i, ky, kx)`.
    fn effective_weights(&self, k_in: usize, k_out: usize) -> Vec<T> {
        let kk = self.kernel * self.kernel;
        let gamma = gamma_as::<T>(self.gamma.as_ref(), self.inputs);
        let mut w = Vec::with_capacity(k_out * k_in * kk);
        for j in 0..k_out {
            for (i, &g) in gamma.iter().enumerate().take(k_in) {
                let base = (j * self.inputs + i) * kk;
                w.extend(self.weight.value[base..base + kk].iter().map(|&v| g * effective(v, self.binary)));
            }
        }
        w
    }

    pub fn forward(&mut self, x: &Tensor<T>, k_in: usize, k_out: usize, pass: &mut Pass) -> Result<Tensor<T>> {
        check_active("k_in", k_in, self.inputs)?;
        check_active("k_out", k_out, self.outputs)?;
        if x.ndim() != 4 || x.shape()[1] < k_in {
            return Err(IdpError::dims("IncompleteConv2d::forward", x.shape(), &[k_in]));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let geom = self.geometry(k_in, h, w)?;
        let p = geom.out_pixels();
        let w_eff = self.effective_weights(k_in, k_out);
        let sample = c * h * w;

        let mut y = if pass.reference {
            let f = Tensor::new(vec![k_out, k_in, self.kernel, self.kernel], w_eff.clone())?;
            let mut y = Vec::with_capacity(b * k_out * p);
            for s in 0..b {
                let xs = Tensor::new(vec![k_in, h, w], x.data()[s * sample..s * sample + k_in * h * w].to_vec())?;
                y.extend(conv2d_direct(&xs, &f, self.stride, self.pad, &mut pass.macs)?.into_data());
            }
            y
        } else {
            pass.macs += b as u64 * self.macs(k_in, k_out, geom.out_h, geom.out_w);
            conv_forward_batch(x.data(), b, sample, &geom, &w_eff, k_out)
        };
        for (plane, v) in y.chunks_exact_mut(p).enumerate() {
            let bj = self.bias.value[plane % k_out];
            v.iter_mut().for_each(|y| *y += bj);
        }
        self.cache = pass
            .keep_cache
            .then(|| ConvCache { x: x.data().to_vec(), batch: b, channels: c, geom, k_out, w_eff });
        Tensor::new(vec![b, k_out, geom.out_h, geom.out_w], y)
    }

    /// Accumulates masked parameter gradients and returns `∂L/∂x` shaped like
    /// the forward input (zero beyond `k_in`).
    pub fn backward(&mut self, dy: &Tensor<T>, mask: &UpdateMask) -> Result<Tensor<T>> {
        mask.validate(self.inputs, self.outputs)?;
        let c = self
            .cache
            .take()
            .ok_or_else(|| IdpError::State("IncompleteConv2d::backward without a cached forward".into()))?;
        let g = c.geom;
        let expect = [c.batch, c.k_out, g.out_h, g.out_w];
        if dy.shape() != expect {
            return Err(IdpError::dims("IncompleteConv2d::backward", dy.shape(), &expect));
        }
        let (dx, dw) = conv_backward_batch(&c.x, c.batch, c.channels * g.in_pixels(), &g, &c.w_eff, c.k_out, dy.data());
        let kk = self.kernel * self.kernel;
        let k_in = g.channels;
        let gamma = gamma_as::<T>(self.gamma.as_ref(), self.inputs);
        for j in 0..c.k_out {
            for i in 0..k_in {
                for t in 0..kk {
                    let idx = (j * self.inputs + i) * kk + t;
                    let grad = gamma[i] * dw[(j * k_in + i) * kk + t];
                    self.weight.grad[idx] += straight_through(self.weight.value[idx], grad, self.binary);
                }
            }
        }
        let p = g.out_pixels();
        for s in 0..c.batch {
            for j in 0..c.k_out {
                let base = (s * c.k_out + j) * p;
                self.bias.grad[j] += dy.data()[base..base + p].iter().copied().sum::<T>();
            }
        }
        self.weight.mask_grad(mask);
        self.bias.mask_grad(mask);
        pad_channels(dx, c.batch, k_in, c.channels, g.in_pixels(), g.height, g.width)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Widens `batch × k × (h·w)` data to `batch × c × h × w` with zero channels.
pub(crate) fn pad_channels<T: Scalar>(
    data: Vec<T>,
    batch: usize,
    k: usize,
    c: usize,
    pixels: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if k == c {
        return Tensor::new(vec![batch, c, h, w], data);
    }
    let mut out = vec![T::zero(); batch * c * pixels];
    for s in 0..batch {
        out[s * c * pixels..(s * c + k) * pixels].copy_from_slice(&data[s * k * pixels..(s + 1) * k * pixels]);
    }
    Tensor::new(vec![batch, c, h, w], out)
}
