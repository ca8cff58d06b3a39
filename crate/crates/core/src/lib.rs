pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod refine;
pub mod scalar;
pub mod syndata;
pub mod tensor;
pub mod train;
pub mod uncertainty;
pub mod viz;

pub use error::{PlugError, Result};

pub type PlugModelF32 = model::PlugModel<f32>;
pub type PlugModelF64 = model::PlugModel<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
