//! Cross-view BEV supervision laboratory.

pub mod analysis;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod mapeval;
pub mod scalar;
pub mod scenegen;
pub mod supervision;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision instantiations of the generic core.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamSet = tensor::ParamSet<f64>;
pub type FeatureMap = encoders::FeatureMap<f64>;
pub type TeacherEncoder = encoders::TeacherEncoder<f64>;
pub type StudentEncoder = encoders::StudentEncoder<f64>;
pub type MapDecoder = encoders::MapDecoder<f64>;
pub type AffineAdapter = supervision::AffineAdapter<f64>;
pub type StudentRun = supervision::StudentRun<f64>;
pub type TeacherRun = supervision::TeacherRun<f64>;
