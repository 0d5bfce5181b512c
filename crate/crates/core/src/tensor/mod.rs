//! Dense row-major tensors and the primitive operations layers are built from.
//!
//! Everything is channels-first: a single image is `C × H × W`, a batch is
//! `B × C × H × W`. Layers hand-code their backward passes on top of these
//! primitives; there is no graph-based autodiff.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{IdpError, Result};

pub mod conv;
pub mod gemm;
pub mod ops;

pub use conv::{col2im, conv2d, conv2d_backward, conv2d_direct, im2col, Conv2dGeometry};
pub use gemm::{gemm, gemm_nt, matmul, matmul_backward, transpose};
pub use ops::{
    BN_MOMENTUM,
    avgpool2d, avgpool2d_backward, batchnorm_backward, batchnorm_forward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, softmax_cross_entropy, BatchNormCache, BatchNormState,
    BnMode, PoolCache,
};

/// Floating-point element type. Training runs in `f32`; gradient checks run
/// the same code in `f64`.
pub trait Scalar:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(IdpError::dims("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place mutable access; the shape is fixed.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(IdpError::dims("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Copies samples `[start, start + count)` of a batch tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let b = self.shape[0];
        if start + count > b || count == 0 {
            return Err(IdpError::argument(format!(
                "batch slice {start}..{} out of range for batch of {b}",
                start + count
            )));
        }
        let per = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Gathers the given samples of a batch tensor, in order.
    pub fn gather_batch(&self, indices: &[usize]) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Keeps the first `k` entries along axis 1 of a `B × C × ...` tensor.
    pub fn narrow_channels(&self, k: usize) -> Result<Self> {
        if self.ndim() < 2 || k == 0 || k > self.shape[1] {
            return Err(IdpError::argument(format!(
                "cannot keep {k} channels of tensor with shape {:?}",
                self.shape
            )));
        }
        let b = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(b * k * inner);
        for s in 0..b {
            let base = s * c * inner;
            data.extend_from_slice(&self.data[base..base + k * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = k;
        Ok(Tensor { shape, data })
    }

    /// Zero-extends axis 1 to `c` entries.
    pub fn pad_channels(&self, c: usize) -> Result<Self> {
        if self.ndim() < 2 || c < self.shape[1] {
            return Err(IdpError::argument(format!(
                "cannot pad tensor with shape {:?} to {c} channels",
                self.shape
            )));
        }
        let b = self.shape[0];
        let k = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = vec![T::zero(); b * c * inner];
        for s in 0..b {
            data[s * c * inner..s * c * inner + k * inner]
                .copy_from_slice(&self.data[s * k * inner..(s + 1) * k * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = c;
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
