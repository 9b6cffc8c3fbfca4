//! Grounded video situation recognition.
//!
//! A three-stage transformer that, for each event of a short video, predicts
//! a verb, the semantic roles it takes, a caption per role, and the object
//! proposal that grounds each role, learned without box supervision. The
//! crate also carries its own differentiable tensor substrate, the
//! evaluation metrics, and a synthetic data generator.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predict;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
