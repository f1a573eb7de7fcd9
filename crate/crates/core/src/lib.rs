pub mod adapters;
pub mod autograd;
pub mod config;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod lora;
pub mod media;
pub mod metrics;
pub mod model;
pub mod output_projection;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
