//! Dysarthric speech synthesis at desk scale: a multi-stage rhythm predictor
//! with contrastive preference optimization, style-conditioned optimal-transport
//! conditional flow matching, and the matching evaluation metrics (MCD, WER).
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`) via
//! [`scalar::Scalar`]; the pipeline-level modules (training, checkpoints, CLI
//! plumbing) instantiate it at [`Real`].

pub mod alignment;
pub mod corpus;
pub mod cpo;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nn;
pub mod rhythm;
pub mod rng;
pub mod scalar;
pub mod style;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the shipped pipeline (training, checkpoints, CLI).
pub type Real = f64;

/// Matrix of pipeline scalars.
pub type RealTensor = tensor::Tensor<Real>;

/// Mel spectrogram carried through the shipped pipeline.
pub type RealMel = corpus::MelSpectrogram<Real>;
