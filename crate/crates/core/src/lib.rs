//! Discrete domain generalization laboratory: a small reverse-mode autodiff
//! engine, a vector-quantization codebook between a patch encoder and a
//! classifier, synthetic multi-domain data, the training harness and exact
//! distribution-gap computations.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32`, `f64`); the
//! data pipeline, training and checkpoints are `f64`. The aliases below fix
//! the generic types to `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod codebook;
pub mod data;
pub mod error;
pub mod model;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod theory;
pub mod training;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use rng::Prng;
pub use training::RunConfig;

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Sgd = autodiff::Sgd<f64>;
pub type Codebook = codebook::Codebook<f64>;
pub type FeatureGrid = codebook::FeatureGrid<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type TeacherState = model::TeacherState<f64>;
pub type PiecewiseDensity = theory::PiecewiseDensity<f64>;
pub type Partition = theory::Partition<f64>;
