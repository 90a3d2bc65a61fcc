//! Serialized output training for multi-talker speech recognition.
//!
//! Three label serialization strategies (first-in-first-out, permutation
//! invariant, and dominance ordering by a CTC head on the encoder), a toy
//! attention encoder-decoder with exact reverse-mode gradients, a synthetic
//! mixture generator, and speaker-blind / speaker-aware WER scoring.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the precision for the common cases.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod serialization;
pub mod trainer;
pub mod vocab;

pub use config::{ExperimentConfig, Strategy};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use vocab::{TokenId, TokenSequence, Vocabulary};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type LogitGrid64 = ctc::LogitGrid<f64>;
pub type LogitGrid32 = ctc::LogitGrid<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type TrainSample32 = trainer::TrainSample<f32>;
