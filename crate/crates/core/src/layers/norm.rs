use super::{Param, ParamLayout, Pass, UpdateMask};
use crate::error::{IdpError, Result};
use crate::tensor::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormState, Scalar, Tensor};

/// Batch normalization over the active channels of its input.
///
/// Running statistics are kept per slot so that several operating points
/// can share the affine parameters while each keeps its own statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub stats: Vec<BatchNormState<T>>,
    channels: usize,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, slots: usize) -> Self {
        BatchNorm {
            scale: Param::filled(vec![channels], T::one(), ParamLayout::PerOutput, false),
            shift: Param::filled(vec![channels], T::zero(), ParamLayout::PerOutput, false),
            stats: vec![BatchNormState::new(channels); slots.max(1)],
            channels,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn slots(&self) -> usize {
        self.stats.len()
    }

    /// Resizes the slot list, filling new slots with copies of slot 0.
    pub fn set_slots(&mut self, n: usize) {
        let first = self.stats[0].clone();
        self.stats.resize(n.max(1), first);
    }

    pub fn forward(&mut self, x: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        if x.ndim() < 2 || x.shape()[1] > self.channels {
            return Err(IdpError::dims("BatchNorm::forward", x.shape(), &[self.channels]));
        }
        let slots = self.stats.len();
        let state = self
            .stats
            .get_mut(pass.stats_slot)
            .ok_or_else(|| IdpError::argument(format!("statistics slot {} of {slots}", pass.stats_slot)))?;
        let (y, cache) = batchnorm_forward(x, &self.scale.value, &self.shift.value, state, pass.mode, pass.bn_momentum)?;
        self.cache = pass.keep_cache.then_some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, mask: &UpdateMask) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| IdpError::State("BatchNorm::backward without a cached forward".into()))?;
        let (dx, dscale, dshift) = batchnorm_backward(&cache, dy)?;
        for (j, (a, b)) in dscale.iter().zip(&dshift).enumerate() {
            self.scale.grad[j] += *a;
            self.shift.grad[j] += *b;
        }
        self.scale.mask_grad(mask);
        self.shift.mask_grad(mask);
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.scale, &mut self.shift]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.scale, &self.shift]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
