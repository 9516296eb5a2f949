//! Shared concept spaces for interpretable multimodal learning on the
//! XOR-AND-XOR benchmark: data generation, concept encoders, training,
//! explanations, metrics and baselines.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod encoders;
mod error;
pub mod evaluation;
pub mod explain;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Result, SharcsError};
