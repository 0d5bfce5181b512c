//! Network specifications, the evaluation architectures, active-channel
//! propagation and multi-profile models.

mod arch;
mod model;
mod spec;

pub use arch::{
    architecture, architectures, build_binarynet, build_mlp, build_mobilenet, build_vgg, ArchOptions, Architecture,
    BinaryNet, MobileNet, Mlp, Vgg,
};
pub use model::{select_profile, validate_ranges, Model, Node, ProfileRange};
pub use spec::{ClassifierInput, LayerKind, LayerPlan, LayerSpec, NetworkSpec, Shape};
