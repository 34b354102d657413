//! Binocular mutual learning for few-shot image classification.
//!
//! A dual-view network shares its early residual blocks between a *global*
//! view, trained by point-wise classification over every base class, and a
//! *local* view, trained episodically by prototype matching with an elastic
//! margin. The two views mimic each other's flattened feature distribution
//! through a symmetric KL term, and at meta-test time their nearest-prototype
//! logits are summed.
//!
//! Module map:
//! - [`data`]: dataset loading, synthetic datasets, episode sampling, degradations.
//! - [`model`]: the dual-view residual backbone and the point-wise classifier.
//! - [`losses`]: every training objective together with its analytic gradient.
//! - [`trainer`]: the joint SGD loop, learning-rate schedule and checkpoints.
//! - [`evaluator`]: meta-testing, fusion, ranking and dispersion diagnostics.
//! - [`cli`]: the `bml` command surface.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{BmlError, Result};
