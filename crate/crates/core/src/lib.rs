pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod imageio;
pub mod layers;
pub mod losses;
pub mod mcc;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod stylize;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, ImagePlane};
