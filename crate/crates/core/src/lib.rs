//! Tiny hybrid language models, reversible ablations, and the measurements
//! used to compare them.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod mixers;
pub mod model;
pub mod params;
#[cfg(any(test, feature = "reference"))]
pub mod reference;
pub mod scalar;
pub mod seeding;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
