use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, LayerPlan, NetworkSpec, Shape};
use crate::error::{IdpError, Result};
use crate::layers::{
    BatchNorm, Block, IncompleteConv2d, IncompleteLinear, IncompleteSepConv2d, Pass, Sgd, UpdateMask, WeightLayer,
};
use crate::profiles::make_profile;
use crate::tensor::{avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward, PoolCache, Scalar, Tensor};

/// The IDP interval `(lo, hi]` a profile serves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRange {
    pub lo: f64,
    pub hi: f64,
}

impl ProfileRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
            return Err(IdpError::config("profiles.ranges", format!("range ({lo}, {hi}] is not inside (0, 1]")));
        }
        Ok(ProfileRange { lo, hi })
    }

    pub fn full() -> Self {
        ProfileRange { lo: 0.0, hi: 1.0 }
    }

    pub fn contains(&self, p: f64) -> bool {
        p > self.lo && p <= self.hi
    }
}

/// Ranges must be ordered, contiguous and cover `(0, 1]`.
pub fn validate_ranges(ranges: &[ProfileRange]) -> Result<()> {
    let path = |i: usize| format!("profiles.ranges[{i}]");
    if ranges.is_empty() {
        return Err(IdpError::config("profiles.ranges", "at least one range is required"));
    }
    let mut expect = 0.0;
    for (i, r) in ranges.iter().enumerate() {
        ProfileRange::new(r.lo, r.hi).map_err(|_| IdpError::config(path(i), format!("({}, {}] is empty or outside (0, 1]", r.lo, r.hi)))?;
        if r.lo < expect {
            return Err(IdpError::config(path(i), format!("overlaps the previous range ending at {expect}")));
        }
        if r.lo > expect {
            return Err(IdpError::config(path(i), format!("gap between {expect} and {}", r.lo)));
        }
        expect = r.hi;
    }
    if expect != 1.0 {
        return Err(IdpError::config(path(ranges.len() - 1), format!("ranges end at {expect}, not 1")));
    }
    Ok(())
}

/// Index of the range containing `p`; a boundary value belongs to the lower range.
pub fn select_profile(ranges: &[ProfileRange], p: f64) -> Result<usize> {
    ranges
        .iter()
        .position(|r| r.contains(p))
        .ok_or_else(|| IdpError::config("profiles.ranges", format!("no profile covers IDP fraction {p}")))
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Node<T> {
    /// Stand-in for the per-profile first or last layer.
    Private,
    Block(Block<T>),
    MaxPool { size: usize, stride: usize, cache: Option<PoolCache> },
    AvgPool { size: usize, stride: usize, cache: Option<PoolCache> },
    Flatten { input: Option<Vec<usize>> },
}

/// A network with one shared trunk and, per profile, a private first and
/// last weight layer. A single-profile model has one range, `(0, 1]`.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: NetworkSpec,
    pub ranges: Vec<ProfileRange>,
    pub nodes: Vec<Node<T>>,
    pub firsts: Vec<Block<T>>,
    pub lasts: Vec<Block<T>>,
    /// Evaluate above a profile's range at its upper end instead of
    /// widening into channels it was not trained with.
    pub clamp: bool,
}

fn build_block<T: Scalar>(spec: &NetworkSpec, idx: usize, inp: Shape, out: Shape, slots: usize, rng: &mut impl Rng) -> Result<Block<T>> {
    let l = &spec.layers[idx];
    let shapes = spec.shapes()?;
    let gamma = match spec.profile_of(idx) {
        Some(kind) => Some(make_profile(kind, spec.profile_len(idx, &shapes))?),
        None => None,
    };
    let c = inp.channels();
    let binary = l.kind.is_binary();
    let layer = match l.kind {
        LayerKind::Fc { out } | LayerKind::BFc { out } => WeightLayer::Linear(IncompleteLinear::new(c, out, gamma, binary, rng)?),
        LayerKind::Conv { out, kernel, stride, pad } | LayerKind::BConv { out, kernel, stride, pad } => {
            WeightLayer::Conv(IncompleteConv2d::new(c, out, kernel, stride, pad, gamma, binary, rng)?)
        }
        LayerKind::Sepconv { out, kernel, stride, pad } => {
            WeightLayer::SepConv(IncompleteSepConv2d::new(c, out, kernel, stride, pad, gamma, rng)?)
        }
        _ => unreachable!("not a weight layer"),
    };
    let bn = l.bn.then(|| BatchNorm::new(out.channels(), slots));
    Ok(Block::new(layer, bn, l.relu))
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: NetworkSpec, ranges: Vec<ProfileRange>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        validate_ranges(&ranges)?;
        let shapes = spec.shapes()?;
        let (first, last) = (spec.first_weight(), spec.last_weight());
        let profiles = ranges.len();
        let mut nodes = Vec::with_capacity(spec.layers.len());
        let mut firsts = Vec::new();
        let mut lasts = Vec::new();
        for (idx, l) in spec.layers.iter().enumerate() {
            let (inp, out) = shapes[idx];
            let node = match l.kind {
                _ if idx == first => {
                    for _ in 0..profiles {
                        firsts.push(build_block(&spec, idx, inp, out, 1, rng)?);
                    }
                    Node::Private
                }
                _ if idx == last => Node::Private,
                LayerKind::MaxPool { size, stride } => Node::MaxPool { size, stride, cache: None },
                LayerKind::AvgPool { size, stride } => Node::AvgPool { size, stride, cache: None },
                LayerKind::Flatten => Node::Flatten { input: None },
                _ => Node::Block(build_block(&spec, idx, inp, out, profiles, rng)?),
            };
            nodes.push(node);
        }
        for _ in 0..profiles {
            lasts.push(build_block(&spec, last, shapes[last].0, shapes[last].1, 1, rng)?);
        }
        let mut model = Model { spec, ranges, nodes, firsts, lasts, clamp: true };
        if profiles > 1 {
            for s in 0..profiles {
                let masks = model.stage_masks(s)?;
                for p in model.firsts[s].params_mut() {
                    p.zero_outside(&masks[first]);
                }
                for p in model.lasts[s].params_mut() {
                    p.zero_outside(&masks[last]);
                }
            }
        }
        Ok(model)
    }

    pub fn profiles(&self) -> usize {
        self.ranges.len()
    }

    pub fn select_profile(&self, p: f64) -> Result<usize> {
        select_profile(&self.ranges, p)
    }

    /// The fraction actually used to truncate when `profile` is asked to run at `p`.
    pub fn effective_fraction(&self, p: f64, profile: usize) -> f64 {
        if self.clamp {
            p.min(self.ranges[profile].hi)
        } else {
            p
        }
    }

    pub fn plan(&self, p: f64, profile: usize) -> Result<Vec<LayerPlan>> {
        self.spec.propagate_active_channels(self.effective_fraction(p, profile))
    }

    pub fn count_macs(&self, p: f64, profile: usize) -> Result<u64> {
        self.spec.count_macs(self.effective_fraction(p, profile))
    }

    fn check_profile(&self, profile: usize) -> Result<()> {
        if profile >= self.profiles() {
            return Err(IdpError::argument(format!("profile {profile} of {}", self.profiles())));
        }
        Ok(())
    }

    /// Logits for a `B × C × H × W` batch at IDP fraction `p` through `profile`.
    pub fn forward(&mut self, x: &Tensor<T>, p: f64, profile: usize, pass: &mut Pass) -> Result<Tensor<T>> {
        self.check_profile(profile)?;
        let [c, h, w] = self.spec.input;
        if x.ndim() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(IdpError::dims("Model::forward", x.shape(), &self.spec.input));
        }
        let plans = self.plan(p, profile)?;
        let (first, last) = (self.spec.first_weight(), self.spec.last_weight());
        let mut cur = x.clone();
        for (idx, plan) in plans.iter().enumerate() {
            cur = match &mut self.nodes[idx] {
                Node::Private => {
                    let block = if idx == first { &mut self.firsts[profile] } else { &mut self.lasts[profile] };
                    pass.stats_slot = 0;
                    block.forward(&cur, plan.k_in, plan.k_out, pass)?
                }
                Node::Block(b) => {
                    pass.stats_slot = profile;
                    b.forward(&cur, plan.k_in, plan.k_out, pass)?
                }
                Node::MaxPool { size, stride, cache } => {
                    let (y, c) = maxpool2d(&cur, *size, *stride)?;
                    *cache = pass.keep_cache.then_some(c);
                    y
                }
                Node::AvgPool { size, stride, cache } => {
                    let (y, c) = avgpool2d(&cur, *size, *stride)?;
                    *cache = pass.keep_cache.then_some(c);
                    y
                }
                Node::Flatten { input } => {
                    let shape = cur.shape().to_vec();
                    let b = shape[0];
                    *input = pass.keep_cache.then(|| shape.clone());
                    let n = cur.len() / b.max(1);
                    cur.reshape(&[b, n])?
                }
            };
            debug_assert!(idx != last || cur.shape()[1] == self.spec.classes);
        }
        Ok(cur)
    }

    /// Back-propagates `dlogits` through the last forward pass of `profile`,
    /// accumulating gradients masked per layer (`masks` is indexed like the spec's layers).
    pub fn backward(&mut self, dlogits: &Tensor<T>, profile: usize, masks: &[UpdateMask]) -> Result<()> {
        self.check_profile(profile)?;
        if masks.len() != self.nodes.len() {
            return Err(IdpError::argument(format!("{} masks for {} layers", masks.len(), self.nodes.len())));
        }
        let first = self.spec.first_weight();
        let mut d = dlogits.clone();
        for idx in (first..self.nodes.len()).rev() {
            d = match &mut self.nodes[idx] {
                Node::Private => {
                    let block = if idx == first { &mut self.firsts[profile] } else { &mut self.lasts[profile] };
                    block.backward(&d, &masks[idx])?
                }
                Node::Block(b) => b.backward(&d, &masks[idx])?,
                Node::MaxPool { cache, .. } => {
                    let c = cache.take().ok_or_else(|| IdpError::State("pool backward without forward".into()))?;
                    maxpool2d_backward(&c, &d)?
                }
                Node::AvgPool { cache, .. } => {
                    let c = cache.take().ok_or_else(|| IdpError::State("pool backward without forward".into()))?;
                    avgpool2d_backward(&c, &d)?
                }
                Node::Flatten { input } => {
                    let shape = input.take().ok_or_else(|| IdpError::State("flatten backward without forward".into()))?;
                    d.reshape(&shape)?
                }
            };
        }
        Ok(())
    }

    /// Update masks of the stage that trains `profile`.
    ///
    /// Trunk layers may update the channel band between the previous
    /// profile's upper end and this profile's. The private layers may update
    /// everything up to this profile's upper end.
    pub fn stage_masks(&self, profile: usize) -> Result<Vec<UpdateMask>> {
        self.check_profile(profile)?;
        let shapes = self.spec.shapes()?;
        let r = self.ranges[profile];
        let hi = self.spec.propagate_active_channels(r.hi)?;
        let lo = if r.lo > 0.0 {
            self.spec.propagate_active_channels(r.lo)?
        } else {
            vec![LayerPlan { k_in: 0, k_out: 0 }; hi.len()]
        };
        let (first, last) = (self.spec.first_weight(), self.spec.last_weight());
        let masks = (0..self.nodes.len())
            .map(|idx| {
                let (inp, out) = shapes[idx];
                match &self.nodes[idx] {
                    _ if idx == first => UpdateMask { inputs: 0..inp.channels(), outputs: 0..hi[idx].k_out },
                    _ if idx == last => UpdateMask { inputs: 0..hi[idx].k_in, outputs: 0..out.channels() },
                    Node::Block(_) => UpdateMask { inputs: lo[idx].k_in..hi[idx].k_in, outputs: lo[idx].k_out..hi[idx].k_out },
                    _ => UpdateMask::full(inp.channels(), out.channels()),
                }
            })
            .collect();
        Ok(masks)
    }

    pub fn zero_grad(&mut self, profile: usize) {
        for p in self.params_mut(profile) {
            p.zero_grad();
        }
    }

    /// One optimizer step on the parameters `profile` trains, within `masks`.
    pub fn sgd_step(&mut self, sgd: &Sgd, profile: usize, masks: &[UpdateMask]) {
        let first = self.spec.first_weight();
        let last = self.spec.last_weight();
        for p in self.firsts[profile].params_mut() {
            sgd.step(p, &masks[first]);
        }
        for p in self.lasts[profile].params_mut() {
            sgd.step(p, &masks[last]);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if let Node::Block(b) = node {
                for p in b.params_mut() {
                    sgd.step(p, &masks[idx]);
                }
            }
        }
    }

    fn params_mut(&mut self, profile: usize) -> Vec<&mut crate::layers::Param<T>> {
        let mut v = self.firsts[profile].params_mut();
        v.extend(self.lasts[profile].params_mut());
        for node in &mut self.nodes {
            if let Node::Block(b) = node {
                v.extend(b.params_mut());
            }
        }
        v
    }

    /// Named tensors in a fixed order: each profile's first layer, the trunk,
    /// each profile's last layer.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let (first, last) = (self.spec.first_weight(), self.spec.last_weight());
        let mut v = Vec::new();
        for (s, b) in self.firsts.iter().enumerate() {
            v.extend(b.tensors().into_iter().map(|(n, sh, d)| (format!("profile{s}.layer{first}.{n}"), sh, d)));
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Node::Block(b) = node {
                v.extend(b.tensors().into_iter().map(|(n, sh, d)| (format!("trunk.layer{idx}.{n}"), sh, d)));
            }
        }
        for (s, b) in self.lasts.iter().enumerate() {
            v.extend(b.tensors().into_iter().map(|(n, sh, d)| (format!("profile{s}.layer{last}.{n}"), sh, d)));
        }
        v
    }

    /// Mutable views in the order of [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::new();
        for b in &mut self.firsts {
            v.extend(b.tensors_mut());
        }
        for node in &mut self.nodes {
            if let Node::Block(b) = node {
                v.extend(b.tensors_mut());
            }
        }
        for b in &mut self.lasts {
            v.extend(b.tensors_mut());
        }
        v
    }

    pub fn clear_caches(&mut self) {
        for b in self.firsts.iter_mut().chain(self.lasts.iter_mut()) {
            b.clear_cache();
        }
        for node in &mut self.nodes {
            match node {
                Node::Block(b) => b.clear_cache(),
                Node::MaxPool { cache, .. } | Node::AvgPool { cache, .. } => *cache = None,
                Node::Flatten { input } => *input = None,
                Node::Private => {}
            }
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.firsts.iter().chain(&self.lasts).any(|b| b.bn.is_some())
            || self.nodes.iter().any(|n| matches!(n, Node::Block(b) if b.bn.is_some()))
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for b in self.firsts.iter().chain(self.lasts.iter()) {
            n += b.named_params().iter().map(|(_, p)| p.len()).sum::<usize>();
        }
        for node in &self.nodes {
            if let Node::Block(b) = node {
                n += b.named_params().iter().map(|(_, p)| p.len()).sum::<usize>();
            }
        }
        n
    }
}
