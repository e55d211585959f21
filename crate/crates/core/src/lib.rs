//! Multi-camera negative loss (MCNL) laboratory.
//!
//! Trains small embedding networks on synthetic camera-biased data where each
//! training identity is seen by a single camera, and compares MCNL with
//! batch-hard triplet baselines using re-identification retrieval metrics and
//! camera-separability statistics.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod experiment;
mod io_util;
pub mod linalg;
pub mod losses;
pub mod sampler;
pub mod synthgen;

pub use config::ExperimentConfig;
pub use dataset::{cp_value, inject_outliers, sct_split, Dataset, LabeledExample, OutlierMode};
pub use embedder::{Embedder, ModelConfig, OptimConfig};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalReport};
pub use linalg::Matrix;
pub use losses::{LossConfig, LossKind, LossOutput};
pub use sampler::{Batch, BatchSpec, CameraBatchSampler};
pub use synthgen::{generate, SynthConfig, SyntheticData};
