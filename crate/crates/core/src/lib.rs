//! Few-shot segmentation with query semantic reconstruction of the
//! background prototype.

pub mod checkpoint;
pub mod cli;
pub mod data_synth;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod prototypes;
pub mod qsr;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{QsrError, Result};
pub use scalar::Scalar;

pub type Model32 = model::FssModel<f32>;
pub type Model64 = model::FssModel<f64>;
pub type ClassWeights32 = qsr::ClassWeights<f32>;
pub type ClassWeights64 = qsr::ClassWeights<f64>;
pub type Prototype32 = prototypes::Prototype<f32>;
pub type Prototype64 = prototypes::Prototype<f64>;
pub type FeatureMap32 = encoder::FeatureMap<f32>;
pub type FeatureMap64 = encoder::FeatureMap<f64>;
