//! Audio-driven and motion-controllable talking-head generation in the latent
//! space of a frozen style-based generator.

pub mod audio;
pub mod cli;
pub mod autograd;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod gradcheck;
pub mod inference;
pub mod manipulation;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod params;
pub mod perceptual;
pub mod posterior;
pub mod prior;
pub mod prob;
pub mod scalar;
pub mod sync;
pub mod tensor;
pub mod tensor_io;
pub mod training;
pub mod types;
pub mod world;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type TalkerModel32 = model::TalkerModel<f32>;
pub type TalkerModel64 = model::TalkerModel<f64>;
