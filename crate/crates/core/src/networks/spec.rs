use serde::{Deserialize, Serialize};

use crate::error::{IdpError, Result};
use crate::profiles::{active_channels, ProfileKind};
use crate::tensor::Conv2dGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Fc { out: usize },
    Conv { out: usize, kernel: usize, stride: usize, pad: usize },
    Sepconv { out: usize, kernel: usize, stride: usize, pad: usize },
    BConv { out: usize, kernel: usize, stride: usize, pad: usize },
    BFc { out: usize },
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
}

impl LayerKind {
    pub fn is_weight(&self) -> bool {
        !matches!(self, LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } | LayerKind::Flatten)
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, LayerKind::BConv { .. } | LayerKind::BFc { .. })
    }

    fn conv_dims(&self) -> Option<(usize, usize, usize, usize)> {
        match *self {
            LayerKind::Conv { out, kernel, stride, pad }
            | LayerKind::Sepconv { out, kernel, stride, pad }
            | LayerKind::BConv { out, kernel, stride, pad } => Some((out, kernel, stride, pad)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub idp: bool,
    /// Overrides the network-wide profile for this layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_kind: Option<ProfileKind>,
    #[serde(default)]
    pub bn: bool,
    #[serde(default)]
    pub relu: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { kind, idp: false, profile_kind: None, bn: false, relu: false }
    }

    pub fn idp(mut self) -> Self {
        self.idp = true;
        self
    }

    pub fn bn(mut self) -> Self {
        self.bn = true;
        self
    }

    pub fn relu(mut self) -> Self {
        self.relu = true;
        self
    }
}

/// How many of its inputs the final classifier reads at IDP fraction `p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// The first `⌈p·C⌉` channels of its input; the producer skips the rest.
    #[default]
    ActivePrefix,
    /// All inputs, like any other complete layer.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub classes: usize,
    /// Profile of every IDP layer without its own override.
    pub profile: ProfileKind,
    #[serde(default)]
    pub classifier_input: ClassifierInput,
    /// Index of the first layer placed on the remote side of a device/cloud
    /// split. Informational only; the model runs in one process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_split: Option<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Activation shape between layers, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Image { c, .. } => c,
            Shape::Flat(n) => n,
        }
    }

    /// Pixels per channel (1 for flat shapes).
    pub fn spatial(&self) -> usize {
        match *self {
            Shape::Image { h, w, .. } => h * w,
            Shape::Flat(_) => 1,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels() * self.spatial()
    }
}

/// Active channel counts of one layer at some IDP fraction. Pass-through
/// layers have `k_in == k_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub k_in: usize,
    pub k_out: usize,
}

impl NetworkSpec {
    pub fn with_profile(mut self, profile: ProfileKind) -> Self {
        self.profile = profile;
        self
    }

    pub fn weight_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.is_weight()).collect()
    }

    pub fn first_weight(&self) -> usize {
        self.weight_indices()[0]
    }

    pub fn last_weight(&self) -> usize {
        *self.weight_indices().last().expect("validated spec has weight layers")
    }

    pub fn profile_of(&self, idx: usize) -> Option<ProfileKind> {
        let l = &self.layers[idx];
        l.idp.then(|| l.profile_kind.unwrap_or(self.profile))
    }

    /// Input and output shape of every layer. Fails if adjacent layers do not compose.
    pub fn shapes(&self) -> Result<Vec<(Shape, Shape)>> {
        let [c, h, w] = self.input;
        let mut cur = Shape::Image { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, l) in self.layers.iter().enumerate() {
            let path = || format!("network.layers[{idx}]");
            let next = match (l.kind, cur) {
                (LayerKind::Flatten, s) => Shape::Flat(s.numel()),
                (LayerKind::Fc { out } | LayerKind::BFc { out }, Shape::Flat(_)) => Shape::Flat(out),
                (LayerKind::Fc { .. } | LayerKind::BFc { .. }, Shape::Image { .. }) => {
                    return Err(IdpError::config(path(), "fully connected layer needs a flattened input"));
                }
                (LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride }, Shape::Image { c, h, w }) => {
                    if size == 0 || stride == 0 || size > h || size > w || (h - size) % stride != 0 || (w - size) % stride != 0 {
                        return Err(IdpError::config(path(), format!("pool {size}/{stride} does not tile {h}x{w}")));
                    }
                    Shape::Image { c, h: (h - size) / stride + 1, w: (w - size) / stride + 1 }
                }
                (kind, Shape::Image { c, h, w }) if kind.conv_dims().is_some() => {
                    let (o, k, s, p) = kind.conv_dims().unwrap();
                    let g = Conv2dGeometry::new(c, h, w, k, s, p).map_err(|e| IdpError::config(path(), e.to_string()))?;
                    Shape::Image { c: o, h: g.out_h, w: g.out_w }
                }
                _ => return Err(IdpError::config(path(), "layer does not accept a flat input")),
            };
            if next.numel() == 0 {
                return Err(IdpError::config(path(), "layer has zero outputs"));
            }
            out.push((cur, next));
            cur = next;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(IdpError::config("network.classes", "need at least two classes"));
        }
        if self.input.contains(&0) {
            return Err(IdpError::config("network.input", "input dimensions must be positive"));
        }
        let weights = self.weight_indices();
        if weights.len() < 2 {
            return Err(IdpError::config("network.layers", "need a first and a last weight layer"));
        }
        let shapes = self.shapes()?;
        let (_, last) = shapes[self.last_weight()];
        if self.last_weight() != self.layers.len() - 1 || last != Shape::Flat(self.classes) {
            return Err(IdpError::config(
                "network.layers",
                format!("the last layer must be a classifier with {} outputs", self.classes),
            ));
        }
        for (idx, l) in self.layers.iter().enumerate() {
            if l.idp && !l.kind.is_weight() {
                return Err(IdpError::config(format!("network.layers[{idx}].idp"), "only weight layers can be IDP"));
            }
            if self.profile_of(idx) == Some(ProfileKind::Linear) && self.profile_len(idx, &shapes) < 2 {
                return Err(IdpError::config(
                    format!("network.layers[{idx}]"),
                    "linear profile needs at least two channels",
                ));
            }
        }
        Ok(())
    }

    /// Length of the coefficient vector of layer `idx`: its input channels,
    /// or its output channels for a separable convolution.
    pub(crate) fn profile_len(&self, idx: usize, shapes: &[(Shape, Shape)]) -> usize {
        match self.layers[idx].kind {
            LayerKind::Sepconv { out, .. } => out,
            _ => shapes[idx].0.channels(),
        }
    }

    /// Active channel counts of every layer at IDP fraction `p`.
    ///
    /// An IDP layer reads the first `⌈p·N⌉` of its `N` input channels; a CDP
    /// layer reads all of them, except that the final classifier reads the
    /// active prefix under [`ClassifierInput::ActivePrefix`]. Every weight
    /// layer then produces exactly as many channels as its consumer reads.
    pub fn propagate_active_channels(&self, p: f64) -> Result<Vec<LayerPlan>> {
        active_channels(p, 1)?;
        let shapes = self.shapes()?;
        let last = self.last_weight();
        let n = self.layers.len();
        // channels each layer reads, in units of its input shape's channels
        let mut reads = vec![0usize; n];
        for (idx, l) in self.layers.iter().enumerate() {
            let c_in = shapes[idx].0.channels();
            reads[idx] = if !l.kind.is_weight() {
                c_in
            } else if l.idp {
                active_channels(p, c_in)?
            } else if idx == last && self.classifier_input == ClassifierInput::ActivePrefix {
                self.classifier_prefix(idx, p, &shapes)?
            } else {
                c_in
            };
        }
        // walk backwards: demand = channels the downstream consumer needs from layer idx's output
        let mut plans = vec![LayerPlan { k_in: 0, k_out: 0 }; n];
        let mut demand = shapes[n - 1].1.channels();
        for idx in (0..n).rev() {
            let l = &self.layers[idx];
            let (inp, outp) = shapes[idx];
            if l.kind.is_weight() {
                plans[idx] = LayerPlan { k_in: reads[idx], k_out: demand.min(outp.channels()) };
                demand = reads[idx];
            } else {
                let k = match l.kind {
                    // a prefix of d features spans ⌈d / spatial⌉ leading channels
                    LayerKind::Flatten => demand.div_ceil(inp.spatial()).min(inp.channels()),
                    _ => demand,
                };
                plans[idx] = LayerPlan { k_in: k, k_out: demand };
                demand = k;
            }
        }
        // layers upstream of the first weight layer see the raw input
        for idx in 0..self.first_weight() {
            let c = shapes[idx].0.channels();
            plans[idx] = LayerPlan { k_in: c, k_out: shapes[idx].1.channels() };
        }
        Ok(plans)
    }

    /// Classifier input width at `p`: whole channels of the layer feeding a flatten.
    fn classifier_prefix(&self, idx: usize, p: f64, shapes: &[(Shape, Shape)]) -> Result<usize> {
        let inp = shapes[idx].0;
        if idx > 0 && self.layers[idx - 1].kind == LayerKind::Flatten {
            let src = shapes[idx - 1].0;
            return Ok(active_channels(p, src.channels())? * src.spatial());
        }
        active_channels(p, inp.channels())
    }

    /// Multiply-accumulates of one forward pass of one sample at `p`.
    pub fn count_macs(&self, p: f64) -> Result<u64> {
        Ok(self.layer_macs(p)?.iter().sum())
    }

    /// Per-layer multiply-accumulates of one sample at `p`; zero for pooling and flatten.
    pub fn layer_macs(&self, p: f64) -> Result<Vec<u64>> {
        let plans = self.propagate_active_channels(p)?;
        let shapes = self.shapes()?;
        let macs = self
            .layers
            .iter()
            .enumerate()
            .map(|(idx, l)| {
                let LayerPlan { k_in, k_out } = plans[idx];
                let pixels = shapes[idx].1.spatial() as u64;
                match l.kind {
                    LayerKind::Fc { .. } | LayerKind::BFc { .. } => (k_in * k_out) as u64,
                    LayerKind::Conv { kernel, .. } | LayerKind::BConv { kernel, .. } => {
                        (k_out * k_in * kernel * kernel) as u64 * pixels
                    }
                    LayerKind::Sepconv { kernel, .. } => (k_in * kernel * kernel + k_out * k_in) as u64 * pixels,
                    _ => 0,
                }
            })
            .collect();
        Ok(macs)
    }

    /// Total number of learnable values, optionally without the private
    /// first and last layers.
    pub fn parameter_count(&self, include_private: bool) -> Result<usize> {
        let shapes = self.shapes()?;
        let (first, last) = (self.first_weight(), self.last_weight());
        let mut total = 0;
        for (idx, l) in self.layers.iter().enumerate() {
            if !include_private && (idx == first || idx == last) {
                continue;
            }
            let c = shapes[idx].0.channels();
            let bn = if l.bn { 2 * shapes[idx].1.channels() } else { 0 };
            total += bn + match l.kind {
                LayerKind::Fc { out } | LayerKind::BFc { out } => out * c + out,
                LayerKind::Conv { out, kernel, .. } | LayerKind::BConv { out, kernel, .. } => {
                    out * c * kernel * kernel + out
                }
                LayerKind::Sepconv { out, kernel, .. } => c * kernel * kernel + out * c + out,
                _ => 0,
            };
        }
        Ok(total)
    }
}
