use super::{BatchNorm, IncompleteConv2d, IncompleteLinear, IncompleteSepConv2d, Param, Pass, UpdateMask};
use crate::error::Result;
use crate::profiles::ProfileCoefficients;
use crate::tensor::{relu, relu_backward, Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum WeightLayer<T> {
    Linear(IncompleteLinear<T>),
    Conv(IncompleteConv2d<T>),
    SepConv(IncompleteSepConv2d<T>),
}

impl<T: Scalar> WeightLayer<T> {
    pub fn inputs(&self) -> usize {
        match self {
            WeightLayer::Linear(l) => l.inputs(),
            WeightLayer::Conv(l) => l.inputs(),
            WeightLayer::SepConv(l) => l.inputs(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            WeightLayer::Linear(l) => l.outputs(),
            WeightLayer::Conv(l) => l.outputs(),
            WeightLayer::SepConv(l) => l.outputs(),
        }
    }

    pub fn gamma(&self) -> Option<&ProfileCoefficients> {
        match self {
            WeightLayer::Linear(l) => l.gamma.as_ref(),
            WeightLayer::Conv(l) => l.gamma.as_ref(),
            WeightLayer::SepConv(l) => l.gamma.as_ref(),
        }
    }

    pub fn is_incomplete(&self) -> bool {
        self.gamma().is_some()
    }

    /// Spatial output size for an `h × w` input (unchanged for linear layers).
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = match self {
            WeightLayer::Linear(_) => return Ok((h, w)),
            WeightLayer::Conv(l) => l.geometry(1, h, w)?,
            WeightLayer::SepConv(l) => l.geometry(1, h, w)?,
        };
        Ok((g.out_h, g.out_w))
    }

    /// Multiply-accumulates for one sample with an `h × w` input.
    pub fn macs(&self, k_in: usize, k_out: usize, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok(match self {
            WeightLayer::Linear(l) => l.macs(k_in, k_out),
            WeightLayer::Conv(l) => l.macs(k_in, k_out, oh, ow),
            WeightLayer::SepConv(l) => l.macs(k_in, k_out, oh, ow),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, k_in: usize, k_out: usize, pass: &mut Pass) -> Result<Tensor<T>> {
        match self {
            WeightLayer::Linear(l) => l.forward(x, k_in, k_out, pass),
            WeightLayer::Conv(l) => l.forward(x, k_in, k_out, pass),
            WeightLayer::SepConv(l) => l.forward(x, k_in, k_out, pass),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>, mask: &UpdateMask) -> Result<Tensor<T>> {
        match self {
            WeightLayer::Linear(l) => l.backward(dy, mask),
            WeightLayer::Conv(l) => l.backward(dy, mask),
            WeightLayer::SepConv(l) => l.backward(dy, mask),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            WeightLayer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            WeightLayer::Conv(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            WeightLayer::SepConv(l) => {
                vec![("depthwise", &l.depthwise), ("pointwise", &l.pointwise), ("bias", &l.bias)]
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            WeightLayer::Linear(l) => l.params_mut().into(),
            WeightLayer::Conv(l) => l.params_mut().into(),
            WeightLayer::SepConv(l) => l.params_mut().into(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            WeightLayer::Linear(l) => l.clear_cache(),
            WeightLayer::Conv(l) => l.clear_cache(),
            WeightLayer::SepConv(l) => l.clear_cache(),
        }
    }
}

/// A weight layer followed by optional batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub layer: WeightLayer<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
    pre_relu: Option<Tensor<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn new(layer: WeightLayer<T>, bn: Option<BatchNorm<T>>, relu: bool) -> Self {
        Block { layer, bn, relu, pre_relu: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, k_in: usize, k_out: usize, pass: &mut Pass) -> Result<Tensor<T>> {
        let mut y = self.layer.forward(x, k_in, k_out, pass)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y, pass)?;
        }
        if self.relu {
            let out = relu(&y);
            self.pre_relu = pass.keep_cache.then_some(y);
            return Ok(out);
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, mask: &UpdateMask) -> Result<Tensor<T>> {
        let mut d = if self.relu {
            let pre = self
                .pre_relu
                .take()
                .ok_or_else(|| crate::error::IdpError::State("Block::backward without a cached forward".into()))?;
            relu_backward(&pre, dy)?
        } else {
            dy.clone()
        };
        if let Some(bn) = &mut self.bn {
            d = bn.backward(&d, mask)?;
        }
        self.layer.backward(&d, mask)
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut v = self.layer.named_params();
        if let Some(bn) = &self.bn {
            v.push(("bn.scale", &bn.scale));
            v.push(("bn.shift", &bn.shift));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.layer.params_mut();
        if let Some(bn) = &mut self.bn {
            v.extend(bn.params_mut());
        }
        v
    }

    /// Every stored tensor (parameters, then running statistics) with its shape.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v: Vec<_> = self
            .named_params()
            .into_iter()
            .map(|(n, p)| (n.to_string(), p.shape.clone(), p.value.as_slice()))
            .collect();
        if let Some(bn) = &self.bn {
            for (slot, st) in bn.stats.iter().enumerate() {
                v.push((format!("bn.mean.{slot}"), vec![st.mean.len()], st.mean.as_slice()));
                v.push((format!("bn.var.{slot}"), vec![st.var.len()], st.var.as_slice()));
            }
        }
        v
    }

    /// Mutable views in the same order as [`Block::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = match &mut self.layer {
            WeightLayer::Linear(l) => vec![&mut l.weight.value, &mut l.bias.value],
            WeightLayer::Conv(l) => vec![&mut l.weight.value, &mut l.bias.value],
            WeightLayer::SepConv(l) => vec![&mut l.depthwise.value, &mut l.pointwise.value, &mut l.bias.value],
        };
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.scale.value);
            v.push(&mut bn.shift.value);
            for st in &mut bn.stats {
                v.push(&mut st.mean);
                v.push(&mut st.var);
            }
        }
        v
    }

    pub fn clear_cache(&mut self) {
        self.layer.clear_cache();
        if let Some(bn) = &mut self.bn {
            bn.clear_cache();
        }
        self.pre_relu = None;
    }
}
