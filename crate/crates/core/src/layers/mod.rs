//! Incomplete layers: fully connected, convolution and depthwise-separable
//! convolution with a channel profile, their binary-weight variants, and the
//! block wrapper (layer → batch norm → ReLU).
//!
//! Every weight layer takes the number of active input channels `k_in` and
//! output channels `k_out` per call. Output truncation is decided by the
//! network, not the layer.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{IdpError, Result};
use crate::profiles::ProfileCoefficients;
use crate::tensor::{BnMode, Scalar, BN_MOMENTUM};

mod block;
mod conv;
mod linear;
mod norm;
mod sepconv;

pub use block::{Block, WeightLayer};
pub use conv::IncompleteConv2d;
pub use linear::IncompleteLinear;
pub use norm::BatchNorm;
pub use sepconv::IncompleteSepConv2d;

/// Per-call forward settings shared by all layers of one pass.
#[derive(Clone, Debug)]
pub struct Pass {
    pub mode: BnMode,
    /// Which set of batch-norm running statistics to read and update.
    pub stats_slot: usize,
    /// Keep the caches needed by `backward`.
    pub keep_cache: bool,
    /// Use the direct-loop reference kernels and count every multiply-accumulate.
    pub reference: bool,
    pub macs: u64,
    /// Weight of the current batch in running batch-norm statistics.
    pub bn_momentum: f64,
}

impl Pass {
    pub fn train(stats_slot: usize) -> Self {
        Pass {
            mode: BnMode::Train,
            stats_slot,
            keep_cache: true,
            reference: false,
            macs: 0,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn eval(stats_slot: usize) -> Self {
        Pass {
            mode: BnMode::Eval,
            stats_slot,
            keep_cache: false,
            reference: false,
            macs: 0,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn reference(mut self) -> Self {
        self.reference = true;
        self
    }

    pub fn with_cache(mut self) -> Self {
        self.keep_cache = true;
        self
    }
}

/// Which parameters a backward pass may update.
///
/// A weight connecting input channel `i` to output channel `j` is trainable
/// iff `i < inputs.end`, `j < outputs.end`, and `i ∈ inputs` or `j ∈ outputs`.
/// In other words the block `[0, inputs.start) × [0, outputs.start)` is frozen,
/// as is everything beyond the ends. Per-output parameters (bias, batch-norm
/// scale and shift) are trainable iff `j ∈ outputs`; per-input parameters
/// (depthwise filters) iff `i ∈ inputs`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    pub inputs: Range<usize>,
    pub outputs: Range<usize>,
}

impl UpdateMask {
    pub fn full(n_in: usize, n_out: usize) -> Self {
        UpdateMask {
            inputs: 0..n_in,
            outputs: 0..n_out,
        }
    }

    pub fn validate(&self, n_in: usize, n_out: usize) -> Result<()> {
        let ok = |r: &Range<usize>, n: usize| r.start <= r.end && r.end <= n;
        if !ok(&self.inputs, n_in) || !ok(&self.outputs, n_out) {
            return Err(IdpError::argument(format!(
                "update mask {:?} x {:?} outside layer channels {n_in} x {n_out}",
                self.inputs, self.outputs
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, j: usize, i: usize) -> bool {
        i < self.inputs.end
            && j < self.outputs.end
            && (i >= self.inputs.start || j >= self.outputs.start)
    }

    #[inline]
    pub fn output(&self, j: usize) -> bool {
        self.outputs.contains(&j)
    }

    #[inline]
    pub fn input(&self, i: usize) -> bool {
        self.inputs.contains(&i)
    }
}

/// How a flat parameter index maps onto channels, for masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamLayout {
    /// `[out, in, inner...]`
    Weight { out: usize, inn: usize, inner: usize },
    /// `[out]`
    PerOutput,
    /// `[in, inner...]`
    PerInput { inner: usize },
}

impl ParamLayout {
    #[inline]
    pub fn trainable(&self, idx: usize, mask: &UpdateMask) -> bool {
        match *self {
            ParamLayout::Weight { inn, inner, .. } => {
                let i = (idx / inner) % inn;
                let j = idx / (inner * inn);
                mask.weight(j, i)
            }
            ParamLayout::PerOutput => mask.output(idx),
            ParamLayout::PerInput { inner } => mask.input(idx / inner),
        }
    }
}

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
    pub layout: ParamLayout,
    /// Weight decay applies to this tensor.
    pub decay: bool,
    /// Values are clipped to `[-c, c]` after every step (binary latent weights).
    pub clip: Option<f64>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>, layout: ParamLayout, decay: bool) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param {
            shape,
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
            layout,
            decay,
            clip: None,
        }
    }

    pub fn filled(shape: Vec<usize>, v: T, layout: ParamLayout, decay: bool) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![v; n], layout, decay)
    }

    /// He (fan-in) normal initialization.
    pub fn he_normal(shape: Vec<usize>, fan_in: usize, layout: ParamLayout, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        Param::new(shape, value, layout, true)
    }

    pub fn with_clip(mut self, c: f64) -> Self {
        self.clip = Some(c);
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Forces gradients outside `mask` to exactly zero.
    pub fn mask_grad(&mut self, mask: &UpdateMask) {
        for (idx, g) in self.grad.iter_mut().enumerate() {
            if !self.layout.trainable(idx, mask) {
                *g = T::zero();
            }
        }
    }

    /// Zeroes values outside `mask`, used for channels a private layer never owns.
    pub fn zero_outside(&mut self, mask: &UpdateMask) {
        for (idx, v) in self.value.iter_mut().enumerate() {
            if !self.layout.trainable(idx, mask) {
                *v = T::zero();
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `v ← μ·v + (g + λ·w)`, `w ← w − η·v` on trainable entries only.
    /// Everything outside `mask`, velocity included, is left bit-identical.
    pub fn step<T: Scalar>(&self, p: &mut Param<T>, mask: &UpdateMask) {
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(if p.decay { self.weight_decay } else { 0.0 });
        let clip = p.clip.map(T::from_f64);
        for idx in 0..p.value.len() {
            if !p.layout.trainable(idx, mask) {
                continue;
            }
            let g = p.grad[idx] + wd * p.value[idx];
            let v = mu * p.velocity[idx] + g;
            p.velocity[idx] = v;
            let mut w = p.value[idx] - lr * v;
            if let Some(c) = clip {
                w = w.max(-c).min(c);
            }
            p.value[idx] = w;
        }
    }
}

/// `Σ_{i<k} γ_i·a_i·b_i`, accumulated in ascending `i`.
pub fn idp_dot<T: Scalar>(a: &[T], b: &[T], gamma: &ProfileCoefficients, k: usize) -> Result<T> {
    let n = gamma.len();
    if a.len() != n || b.len() != n {
        return Err(IdpError::dims("idp_dot", &[a.len(), b.len()], &[n]));
    }
    if k == 0 || k > n {
        return Err(IdpError::argument(format!("active count {k} outside 1..={n}")));
    }
    let mut acc = T::zero();
    for i in 0..k {
        acc += T::from_f64(gamma.gamma()[i]) * a[i] * b[i];
    }
    Ok(acc)
}

/// Effective forward weight: the latent value, or its sign for binary layers
/// (`sign(0) = +1`).
#[inline]
pub(crate) fn effective<T: Scalar>(latent: T, binary: bool) -> T {
    if !binary {
        latent
    } else if latent >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Straight-through gradient of the sign function, cut off where `|latent| > 1`.
#[inline]
pub(crate) fn straight_through<T: Scalar>(latent: T, grad: T, binary: bool) -> T {
    if binary && latent.abs() > T::one() {
        T::zero()
    } else {
        grad
    }
}

pub(crate) fn check_active(what: &str, k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(IdpError::argument(format!("{what} = {k} outside 1..={n}")));
    }
    Ok(())
}

/// Coefficients as `T`, or all ones for a plain (CDP) layer.
pub(crate) fn gamma_as<T: Scalar>(gamma: Option<&ProfileCoefficients>, n: usize) -> Vec<T> {
    match gamma {
        Some(g) => g.gamma().iter().map(|&v| T::from_f64(v)).collect(),
        None => vec![T::one(); n],
    }
}
