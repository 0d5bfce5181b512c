//! The evaluation architectures, registered by name.
//!
//! In every builder the first and last weight layers are complete (CDP) and
//! all interior weight layers are IDP.

use serde::{Deserialize, Serialize};

use super::spec::{ClassifierInput, LayerKind, LayerSpec, NetworkSpec};
use crate::data::DatasetKind;
use crate::error::{IdpError, Result};
use crate::profiles::ProfileKind;

/// Knobs shared by the builders. Fields a builder has no use for are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchOptions {
    /// Channel width multiplier relative to the published layout.
    pub width: f64,
    /// One convolution per stage instead of the full repeat counts.
    pub compact: bool,
    /// Hidden width of the MLP.
    pub hidden: usize,
    pub classifier_input: ClassifierInput,
}

impl Default for ArchOptions {
    fn default() -> Self {
        ArchOptions { width: 1.0, compact: false, hidden: 512, classifier_input: ClassifierInput::Full }
    }
}

impl ArchOptions {
    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width).round() as usize).max(1)
    }

    fn check(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0 && self.width <= 8.0) {
            return Err(IdpError::argument(format!("width scale {} not in (0, 8]", self.width)));
        }
        if self.hidden == 0 {
            return Err(IdpError::argument("hidden width must be positive"));
        }
        Ok(())
    }
}

pub trait Architecture: Sync {
    fn name(&self) -> &'static str;
    fn dataset(&self) -> DatasetKind;
    fn build(&self, opts: &ArchOptions, profile: ProfileKind) -> Result<NetworkSpec>;
}

pub struct Mlp;
pub struct Vgg;
pub struct MobileNet;
pub struct BinaryNet;

static REGISTRY: [&dyn Architecture; 4] = [&Mlp, &Vgg, &MobileNet, &BinaryNet];

pub fn architectures() -> &'static [&'static dyn Architecture] {
    &REGISTRY
}

pub fn architecture(name: &str) -> Result<&'static dyn Architecture> {
    REGISTRY.iter().copied().find(|a| a.name() == name).ok_or_else(|| {
        let known: Vec<_> = REGISTRY.iter().map(|a| a.name()).collect();
        IdpError::config("network.arch", format!("unknown architecture `{name}` (known: {})", known.join(", ")))
    })
}

fn conv(out: usize, stride: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::Conv { out, kernel: 3, stride, pad: 1 }).bn().relu()
}

fn spec(name: &str, input: [usize; 3], profile: ProfileKind, opts: &ArchOptions, layers: Vec<LayerSpec>) -> Result<NetworkSpec> {
    let s = NetworkSpec {
        name: name.to_string(),
        input,
        classes: 10,
        profile,
        classifier_input: opts.classifier_input,
        device_split: None,
        layers,
    };
    s.validate()?;
    Ok(s)
}

impl Architecture for Mlp {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn dataset(&self) -> DatasetKind {
        DatasetKind::Mnist
    }

    /// `784 → h (CDP) → h (IDP) → 10 (CDP)`; the IDP layer sits between two
    /// complete layers so that it truncates learned features, not pixels.
    fn build(&self, opts: &ArchOptions, profile: ProfileKind) -> Result<NetworkSpec> {
        opts.check()?;
        let h = opts.hidden;
        let layers = vec![
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Fc { out: h }).relu(),
            LayerSpec::new(LayerKind::Fc { out: h }).idp().relu(),
            LayerSpec::new(LayerKind::Fc { out: 10 }),
        ];
        spec("mlp", [1, 28, 28], profile, opts, layers)
    }
}

impl Architecture for Vgg {
    fn name(&self) -> &'static str {
        "vgg"
    }

    fn dataset(&self) -> DatasetKind {
        DatasetKind::Cifar10
    }

    /// VGG-16 for 32×32 inputs (13 convolutions, 3 fully connected layers),
    /// or with `compact` one convolution per stage (VGG-8).
    fn build(&self, opts: &ArchOptions, profile: ProfileKind) -> Result<NetworkSpec> {
        opts.check()?;
        let stages: [(usize, usize); 5] = if opts.compact {
            [(64, 1), (128, 1), (256, 1), (512, 1), (512, 1)]
        } else {
            [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]
        };
        let mut layers = Vec::new();
        for (c, reps) in stages {
            for _ in 0..reps {
                layers.push(conv(opts.scaled(c), 1).idp());
            }
            layers.push(LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }));
        }
        layers[0].idp = false;
        let fc = opts.scaled(512);
        layers.push(LayerSpec::new(LayerKind::Flatten));
        layers.push(LayerSpec::new(LayerKind::Fc { out: fc }).idp().relu());
        layers.push(LayerSpec::new(LayerKind::Fc { out: fc }).idp().relu());
        layers.push(LayerSpec::new(LayerKind::Fc { out: 10 }));
        let name = if opts.compact { "vgg8" } else { "vgg16" };
        spec(name, [3, 32, 32], profile, opts, layers)
    }
}

impl Architecture for MobileNet {
    fn name(&self) -> &'static str {
        "mobilenet"
    }

    fn dataset(&self) -> DatasetKind {
        DatasetKind::Cifar10
    }

    /// MobileNet for 32×32 inputs: a standard convolution, separable
    /// convolutions with the usual width schedule, global average pooling.
    fn build(&self, opts: &ArchOptions, profile: ProfileKind) -> Result<NetworkSpec> {
        opts.check()?;
        let schedule: Vec<(usize, usize)> = if opts.compact {
            vec![(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)]
        } else {
            let mut s = vec![(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)];
            s.extend([(512, 1); 5]);
            s.extend([(1024, 2), (1024, 1)]);
            s
        };
        let mut layers = vec![conv(opts.scaled(32), 1)];
        for (c, stride) in schedule {
            let kind = LayerKind::Sepconv { out: opts.scaled(c), kernel: 3, stride, pad: 1 };
            layers.push(LayerSpec::new(kind).idp().bn().relu());
        }
        layers.push(LayerSpec::new(LayerKind::AvgPool { size: 4, stride: 4 }));
        layers.push(LayerSpec::new(LayerKind::Flatten));
        layers.push(LayerSpec::new(LayerKind::Fc { out: 10 }));
        spec("mobilenet", [3, 32, 32], profile, opts, layers)
    }
}

impl Architecture for BinaryNet {
    fn name(&self) -> &'static str {
        "binarynet"
    }

    fn dataset(&self) -> DatasetKind {
        DatasetKind::Mnist
    }

    /// Binary-weight convolutions and fully connected layers for MNIST. The
    /// first two convolutions form the device part of a device/cloud split.
    fn build(&self, opts: &ArchOptions, profile: ProfileKind) -> Result<NetworkSpec> {
        opts.check()?;
        let bconv = |out| LayerSpec::new(LayerKind::BConv { out, kernel: 3, stride: 1, pad: 1 }).bn().relu();
        let (c1, c2, f) = (opts.scaled(32), opts.scaled(64), opts.scaled(256));
        let layers = vec![
            bconv(c1),
            LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }),
            bconv(c2).idp(),
            LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }),
            bconv(c2).idp(),
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::BFc { out: f }).idp().bn().relu(),
            LayerSpec::new(LayerKind::BFc { out: 10 }).bn(),
        ];
        let mut s = spec("binarynet", [1, 28, 28], profile, opts, layers)?;
        s.device_split = Some(4);
        Ok(s)
    }
}

pub fn build_mlp() -> Result<NetworkSpec> {
    Mlp.build(&ArchOptions::default(), ProfileKind::Linear)
}

/// `scale` multiplies channel widths; `compact` selects VGG-8.
pub fn build_vgg(scale: f64, compact: bool) -> Result<NetworkSpec> {
    Vgg.build(&ArchOptions { width: scale, compact, ..ArchOptions::default() }, ProfileKind::Linear)
}

pub fn build_mobilenet(scale: f64, compact: bool) -> Result<NetworkSpec> {
    MobileNet.build(&ArchOptions { width: scale, compact, ..ArchOptions::default() }, ProfileKind::Linear)
}

pub fn build_binarynet() -> Result<NetworkSpec> {
    BinaryNet.build(&ArchOptions::default(), ProfileKind::Linear)
}
