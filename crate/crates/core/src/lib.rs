//! Incomplete dot products: profile-weighted layers whose cost can be cut at
//! inference time by evaluating only a prefix of their channels.

pub mod bench;
pub mod data;
pub mod error;
pub mod layers;
pub mod networks;
pub mod profiles;
pub mod tensor;
pub mod training;

pub use error::{IdpError, Result};
