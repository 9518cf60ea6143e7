//! Few-shot classification with Classifier-Baseline and Meta-Baseline:
//! a small autodiff tensor, MLP encoders, episodic sampling, nearest-centroid
//! heads, both training stages and episodic evaluation.

mod binio;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod heads;
pub mod optim;
pub mod pipelines;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Model32 = checkpoint::Model<f32>;
pub type Model64 = checkpoint::Model<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Episode32 = episodes::Episode<f32>;
pub type Episode64 = episodes::Episode<f64>;
