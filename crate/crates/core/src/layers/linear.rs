use rand::Rng;

use super::{check_active, effective, gamma_as, straight_through, Param, ParamLayout, Pass, UpdateMask};
use crate::error::{IdpError, Result};
use crate::profiles::ProfileCoefficients;
use crate::tensor::{gemm, gemm_nt, transpose, Scalar, Tensor};

/// `y_j = b_j + Σ_{i<k_in} γ_i·w_ji·x_i` for `j < k_out`.
///
/// The coefficient is folded into the weight (`w̃_ji = γ_i·w_ji`) before the
/// dot product, so with an all-one profile the arithmetic is exactly that of
/// a plain affine layer.
#[derive(Clone, Debug)]
pub struct IncompleteLinear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub gamma: Option<ProfileCoefficients>,
    pub binary: bool,
    inputs: usize,
    outputs: usize,
    cache: Option<LinearCache<T>>,
}

#[derive(Clone, Debug)]
struct LinearCache<T> {
    x: Vec<T>,
    batch: usize,
    width: usize,
    k_in: usize,
    k_out: usize,
    /// `k_out × k_in` effective weights.
    w_eff: Vec<T>,
}

impl<T: Scalar> IncompleteLinear<T> {
    pub fn new(
        inputs: usize,
        outputs: usize,
        gamma: Option<ProfileCoefficients>,
        binary: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layout = ParamLayout::Weight { out: outputs, inn: inputs, inner: 1 };
        let mut weight = Param::he_normal(vec![outputs, inputs], inputs, layout, rng);
        if binary {
            weight.clip = Some(1.0);
        }
        Self::from_parts(weight, Param::filled(vec![outputs], T::zero(), ParamLayout::PerOutput, false), gamma, binary)
    }

    pub fn from_parts(
        weight: Param<T>,
        bias: Param<T>,
        gamma: Option<ProfileCoefficients>,
        binary: bool,
    ) -> Result<Self> {
        if weight.shape.len() != 2 || bias.shape != [weight.shape[0]] {
            return Err(IdpError::dims("IncompleteLinear", &weight.shape, &bias.shape));
        }
        let (outputs, inputs) = (weight.shape[0], weight.shape[1]);
        if let Some(g) = &gamma {
            if g.len() != inputs {
                return Err(IdpError::dims("IncompleteLinear profile", &[g.len()], &[inputs]));
            }
        }
        Ok(IncompleteLinear { weight, bias, gamma, binary, inputs, outputs, cache: None })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn macs(&self, k_in: usize, k_out: usize) -> u64 {
        (k_in * k_out) as u64
    }

    fn effective_weights(&self, k_in: usize, k_out: usize) -> Vec<T> {
        let gamma = gamma_as::<T>(self.gamma.as_ref(), self.inputs);
        let mut w = Vec::with_capacity(k_out * k_in);
        for j in 0..k_out {
            let row = &self.weight.value[j * self.inputs..j * self.inputs + k_in];
            w.extend(row.iter().zip(&gamma).map(|(&v, &g)| g * effective(v, self.binary)));
        }
        w
    }

    /// `x` is `B × F` with `F ≥ k_in`; only the first `k_in` features are read.
    pub fn forward(&mut self, x: &Tensor<T>, k_in: usize, k_out: usize, pass: &mut Pass) -> Result<Tensor<T>> {
        check_active("k_in", k_in, self.inputs)?;
        check_active("k_out", k_out, self.outputs)?;
        if x.ndim() != 2 || x.shape()[1] < k_in {
            return Err(IdpError::dims("IncompleteLinear::forward", x.shape(), &[k_in]));
        }
        let (b, f) = (x.shape()[0], x.shape()[1]);
        let xk: Vec<T> = if f == k_in {
            x.data().to_vec()
        } else {
            x.data().chunks_exact(f).flat_map(|r| r[..k_in].iter().copied()).collect()
        };
        let w_eff = self.effective_weights(k_in, k_out);
        let mut y = vec![T::zero(); b * k_out];
        if pass.reference {
            for s in 0..b {
                for j in 0..k_out {
                    let mut acc = T::zero();
                    for i in 0..k_in {
                        pass.macs += 1;
                        acc += xk[s * k_in + i] * w_eff[j * k_in + i];
                    }
                    y[s * k_out + j] = acc;
                }
            }
        } else {
            gemm_nt(b, k_out, k_in, &xk, &w_eff, &mut y);
            pass.macs += (b as u64) * self.macs(k_in, k_out);
        }
        for row in y.chunks_exact_mut(k_out) {
            for (v, &bj) in row.iter_mut().zip(&self.bias.value) {
                *v += bj;
            }
        }
        self.cache = pass.keep_cache.then_some(LinearCache { x: xk, batch: b, width: f, k_in, k_out, w_eff });
        Tensor::new(vec![b, k_out], y)
    }

    /// Accumulates parameter gradients (masked) and returns `∂L/∂x`, shaped like
    /// the forward input (zero beyond `k_in`).
    pub fn backward(&mut self, dy: &Tensor<T>, mask: &UpdateMask) -> Result<Tensor<T>> {
        mask.validate(self.inputs, self.outputs)?;
        let c = self
            .cache
            .take()
            .ok_or_else(|| IdpError::State("IncompleteLinear::backward without a cached forward".into()))?;
        if dy.shape() != [c.batch, c.k_out] {
            return Err(IdpError::dims("IncompleteLinear::backward", dy.shape(), &[c.batch, c.k_out]));
        }
        let (b, k_in, k_out) = (c.batch, c.k_in, c.k_out);
        let mut dx = vec![T::zero(); b * k_in];
        gemm(b, k_in, k_out, dy.data(), &c.w_eff, &mut dx);

        let dyt = transpose(b, k_out, dy.data());
        let mut dw = vec![T::zero(); k_out * k_in];
        gemm(k_out, k_in, b, &dyt, &c.x, &mut dw);
        let gamma = gamma_as::<T>(self.gamma.as_ref(), self.inputs);
        for j in 0..k_out {
            for i in 0..k_in {
                let idx = j * self.inputs + i;
                let g = straight_through(self.weight.value[idx], gamma[i] * dw[j * k_in + i], self.binary);
                self.weight.grad[idx] += g;
            }
            self.bias.grad[j] += (0..b).map(|s| dy.data()[s * k_out + j]).sum::<T>();
        }
        self.weight.mask_grad(mask);
        self.bias.mask_grad(mask);
        if c.width == k_in {
            return Tensor::new(vec![b, k_in], dx);
        }
        let mut full = vec![T::zero(); b * c.width];
        for (dst, src) in full.chunks_exact_mut(c.width).zip(dx.chunks_exact(k_in)) {
            dst[..k_in].copy_from_slice(src);
        }
        Tensor::new(vec![b, c.width], full)
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
