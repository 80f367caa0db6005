//! Cross-modal distillation for visual grounding: the student grounding
//! network, its training objectives, a synthetic referring-expression corpus
//! and the IoU evaluation harness.
//!
//! Numeric code is generic over [`Real`]; the aliases below pin the `f64`
//! instantiation used by the training pipeline and the command line.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod kv;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = numcore::Tensor<f64>;
pub type Graph = numcore::Graph<f64>;
pub type BoundingBox = model::BoundingBox<f64>;
pub type StudentModel = model::StudentModel<f64>;
