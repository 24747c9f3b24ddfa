//! Self-influence memorization scores for pooled-linear softmax classifiers,
//! their per-token attribution along a straight-line path from a baseline
//! input, and the validation experiments built on top of them.
//!
//! The model is convex in its parameters (mean pooling followed by a linear
//! softmax layer with ridge regularization), so every influence quantity can
//! be checked against exact retraining.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod influence;
pub mod model;
pub mod train;

pub use data::{Baseline, BaselineKind, DatasetSchema, ScoreRecord};
pub use error::{Error, Result};
pub use influence::{AttributionReport, EngineConfig, InfluenceEngine, MemorizationScore, SolverMode};
pub use model::{Instance, LossComponents, ModelState};
pub use train::{TrainConfig, TrainReport};
