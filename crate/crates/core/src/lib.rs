//! Spatio-temporal traffic forecasting: adaptive embeddings, a diffusion
//! recovery block for missing values, a transformer filter stack and a
//! regression head, plus the data pipeline and evaluation harness around them.

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod stllm;
pub mod stdf;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
