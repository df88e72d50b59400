pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imageops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod gradcam;
pub mod regressor;
pub mod scoring;
mod training;
pub mod vae;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
