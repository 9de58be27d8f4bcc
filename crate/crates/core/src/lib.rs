//! Core library for a generative viewing-process model of short-video
//! watch time.
//!
//! A video is cut into M segments; the model predicts the conditional
//! probability that a viewer who reached segment i keeps watching, chains
//! those conditionals into a survival curve, and integrates the curve into
//! an expected watch time. The crate provides:
//!
//! - [`tensor`] / [`tape`] / [`gradcheck`]: a small f64 matrix library with
//!   reverse-mode autodiff and a finite-difference verifier,
//! - [`data`]: interaction-log parsing, segment labeling, and example
//!   assembly,
//! - [`synth`]: a seeded synthetic-interaction generator with a ground-truth
//!   oracle,
//! - [`model`]: the two-stream representation encoder and the segment
//!   decoder,
//! - [`losses`] / [`metrics`]: training objectives and MAE / XAUC,
//! - [`baselines`]: four reference predictors over shared features,
//! - [`train`] / [`checkpoint`]: the deterministic trainer and its binary
//!   checkpoint container.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use tensor::{NumericsError, ParameterStore, Tensor};
