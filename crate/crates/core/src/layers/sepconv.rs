use rand::Rng;

use super::conv::pad_channels;
use super::{check_active, gamma_as, Param, ParamLayout, Pass, UpdateMask};
use crate::error::{IdpError, Result};
use crate::profiles::ProfileCoefficients;
use crate::tensor::{gemm, gemm_nt, transpose, Conv2dGeometry, Scalar, Tensor};

/// Depthwise-separable convolution with a profile on the pointwise outputs:
///
/// `z_i = f_i ⋆ x_i` for `i < k_in`, then `y_j = γ_j·(b_j + Σ_{i<k_in} g_ji·z_i)`
/// for `j < k_out`.
#[derive(Clone, Debug)]
pub struct IncompleteSepConv2d<T> {
    /// `inputs × k × k`
    pub depthwise: Param<T>,
    /// `outputs × inputs`
    pub pointwise: Param<T>,
    pub bias: Param<T>,
    /// Indexed by output channel.
    pub gamma: Option<ProfileCoefficients>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    inputs: usize,
    outputs: usize,
    cache: Option<SepCache<T>>,
}

#[derive(Clone, Debug)]
struct SepCache<T> {
    /// Active input channels, `B × k_in × H × W`.
    x: Vec<T>,
    /// Depthwise output, `B × k_in × H' × W'`.
    z: Vec<T>,
    batch: usize,
    channels: usize,
    geom: Conv2dGeometry,
    k_out: usize,
}

impl<T: Scalar> IncompleteSepConv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gamma: Option<ProfileCoefficients>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kk = kernel * kernel;
        let depthwise = Param::he_normal(vec![inputs, kernel, kernel], kk, ParamLayout::PerInput { inner: kk }, rng);
        let layout = ParamLayout::Weight { out: outputs, inn: inputs, inner: 1 };
        let pointwise = Param::he_normal(vec![outputs, inputs], inputs, layout, rng);
        let bias = Param::filled(vec![outputs], T::zero(), ParamLayout::PerOutput, false);
        Self::from_parts(depthwise, pointwise, bias, stride, pad, gamma)
    }

    pub fn from_parts(
        depthwise: Param<T>,
        pointwise: Param<T>,
        bias: Param<T>,
        stride: usize,
        pad: usize,
        gamma: Option<ProfileCoefficients>,
    ) -> Result<Self> {
        let d = &depthwise.shape;
        let p = &pointwise.shape;
        if d.len() != 3 || d[1] != d[2] || p.len() != 2 || p[1] != d[0] || bias.shape != [p[0]] {
            return Err(IdpError::dims("IncompleteSepConv2d", d, p));
        }
        let (outputs, inputs, kernel) = (p[0], p[1], d[1]);
        if let Some(g) = &gamma {
            if g.len() != outputs {
                return Err(IdpError::dims("IncompleteSepConv2d profile", &[g.len()], &[outputs]));
            }
        }
        if stride == 0 {
            return Err(IdpError::config("sepconv", "stride must be positive"));
        }
        Ok(IncompleteSepConv2d {
            depthwise,
            pointwise,
            bias,
            gamma,
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

    /// `k_in·k²·H'·W' + k_out·k_in·H'·W'` per sample.
    pub fn macs(&self, k_in: usize, k_out: usize, out_h: usize, out_w: usize) -> u64 {
        let p = out_h * out_w;
        (k_in * self.kernel * self.kernel * p + k_out * k_in * p) as u64
    }

    fn depthwise_forward(&self, x: &[T], batch: usize, g: &Conv2dGeometry, pass: &mut Pass) -> Vec<T> {
        let (hw, p, k) = (g.in_pixels(), g.out_pixels(), self.kernel);
        let mut z = vec![T::zero(); batch * g.channels * p];
        for s in 0..batch {
            for i in 0..g.channels {
                let plane = &x[(s * g.channels + i) * hw..(s * g.channels + i + 1) * hw];
                let f = &self.depthwise.value[i * k * k..(i + 1) * k * k];
                let out = &mut z[(s * g.channels + i) * p..(s * g.channels + i + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            for kx in 0..k {
                                if pass.reference {
                                    pass.macs += 1;
                                }
                                let (Some(iy), Some(ix)) = (g.source(oy, ky, g.height), g.source(ox, kx, g.width))
                                else {
                                    continue;
                                };
                                acc += f[ky * k + kx] * plane[iy * g.width + ix];
                            }
                        }
                        out[oy * g.out_w + ox] = acc;
                    }
                }
            }
        }
        z
    }

    pub fn forward(&mut self, x: &Tensor<T>, k_in: usize, k_out: usize, pass: &mut Pass) -> Result<Tensor<T>> {
        check_active("k_in", k_in, self.inputs)?;
        check_active("k_out", k_out, self.outputs)?;
        if x.ndim() != 4 || x.shape()[1] < k_in {
            return Err(IdpError::dims("IncompleteSepConv2d::forward", x.shape(), &[k_in]));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let geom = self.geometry(k_in, h, w)?;
        let hw = h * w;
        let xk: Vec<T> = if c == k_in {
            x.data().to_vec()
        } else {
            (0..b).flat_map(|s| x.data()[s * c * hw..(s * c + k_in) * hw].iter().copied()).collect()
        };
        let z = self.depthwise_forward(&xk, b, &geom, pass);
        let p = geom.out_pixels();
        let gmat: Vec<T> = (0..k_out)
            .flat_map(|j| self.pointwise.value[j * self.inputs..j * self.inputs + k_in].iter().copied())
            .collect();
        let gamma = gamma_as::<T>(self.gamma.as_ref(), self.outputs);
        let mut y = vec![T::zero(); b * k_out * p];
        for s in 0..b {
            let zs = &z[s * k_in * p..(s + 1) * k_in * p];
            let ys = &mut y[s * k_out * p..(s + 1) * k_out * p];
            if pass.reference {
                for j in 0..k_out {
                    for t in 0..p {
                        let mut acc = T::zero();
                        for i in 0..k_in {
                            pass.macs += 1;
                            acc += gmat[j * k_in + i] * zs[i * p + t];
                        }
                        ys[j * p + t] = acc;
                    }
                }
            } else {
                gemm(k_out, p, k_in, &gmat, zs, ys);
            }
            for j in 0..k_out {
                for v in &mut ys[j * p..(j + 1) * p] {
                    *v = gamma[j] * (*v + self.bias.value[j]);
                }
            }
        }
        if !pass.reference {
            pass.macs += b as u64 * self.macs(k_in, k_out, geom.out_h, geom.out_w);
        }
        self.cache = pass
            .keep_cache
            .then_some(SepCache { x: xk, z, batch: b, channels: c, geom, k_out });
        Tensor::new(vec![b, k_out, geom.out_h, geom.out_w], y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, mask: &UpdateMask) -> Result<Tensor<T>> {
        mask.validate(self.inputs, self.outputs)?;
        let c = self
            .cache
            .take()
            .ok_or_else(|| IdpError::State("IncompleteSepConv2d::backward without a cached forward".into()))?;
        let g = c.geom;
        let expect = [c.batch, c.k_out, g.out_h, g.out_w];
        if dy.shape() != expect {
            return Err(IdpError::dims("IncompleteSepConv2d::backward", dy.shape(), &expect));
        }
        let (b, k_in, k_out, p, k) = (c.batch, g.channels, c.k_out, g.out_pixels(), self.kernel);
        let gamma = gamma_as::<T>(self.gamma.as_ref(), self.outputs);
        let gmat: Vec<T> = (0..k_out)
            .flat_map(|j| self.pointwise.value[j * self.inputs..j * self.inputs + k_in].iter().copied())
            .collect();
        let gmat_t = transpose(k_out, k_in, &gmat);

        let mut dz = vec![T::zero(); b * k_in * p];
        let mut dg = vec![T::zero(); k_out * k_in];
        let mut scratch = vec![T::zero(); k_out * k_in];
        for s in 0..b {
            // ∂L/∂(pre-profile sum) = γ_j·dy_j
            let mut dys = dy.data()[s * k_out * p..(s + 1) * k_out * p].to_vec();
            for j in 0..k_out {
                let mut sum = T::zero();
                for v in &mut dys[j * p..(j + 1) * p] {
                    *v *= gamma[j];
                    sum += *v;
                }
                self.bias.grad[j] += sum;
            }
            let zs = &c.z[s * k_in * p..(s + 1) * k_in * p];
            gemm_nt(k_out, k_in, p, &dys, zs, &mut scratch);
            for (a, &v) in dg.iter_mut().zip(&scratch) {
                *a += v;
            }
            gemm(k_in, p, k_out, &gmat_t, &dys, &mut dz[s * k_in * p..(s + 1) * k_in * p]);
        }
        for j in 0..k_out {
            for i in 0..k_in {
                self.pointwise.grad[j * self.inputs + i] += dg[j * k_in + i];
            }
        }

        let hw = g.in_pixels();
        let mut dx = vec![T::zero(); b * k_in * hw];
        for s in 0..b {
            for i in 0..k_in {
                let plane = &c.x[(s * k_in + i) * hw..(s * k_in + i + 1) * hw];
                let dplane = &mut dx[(s * k_in + i) * hw..(s * k_in + i + 1) * hw];
                let dzp = &dz[(s * k_in + i) * p..(s * k_in + i + 1) * p];
                let f = &self.depthwise.value[i * k * k..(i + 1) * k * k];
                let df = &mut self.depthwise.grad[i * k * k..(i + 1) * k * k];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let d = dzp[oy * g.out_w + ox];
                        for ky in 0..k {
                            for kx in 0..k {
                                let (Some(iy), Some(ix)) = (g.source(oy, ky, g.height), g.source(ox, kx, g.width))
                                else {
                                    continue;
                                };
                                df[ky * k + kx] += d * plane[iy * g.width + ix];
                                dplane[iy * g.width + ix] += d * f[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        self.depthwise.mask_grad(mask);
        self.pointwise.mask_grad(mask);
        self.bias.mask_grad(mask);
        pad_channels(dx, b, k_in, c.channels, hw, g.height, g.width)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 3] {
        [&mut self.depthwise, &mut self.pointwise, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 3] {
        [&self.depthwise, &self.pointwise, &self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
