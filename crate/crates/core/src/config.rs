//! Experiment configuration file (TOML).
//!
//! Every field has a default; defaults follow the full-scale training recipe
//! (200 epochs, decay from epoch 100). [`ExperimentConfig::desk`] rescales
//! the schedule for quick runs on the synthetic benchmark.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::OutlierMode;
use crate::embedder::{ModelConfig, OptimConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::sampler::BatchSpec;
use crate::synthgen::SynthConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MCNL_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub modes: Vec<OutlierMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.0, 0.02, 0.05, 0.10, 0.14],
            modes: vec![OutlierMode::SctRelabel, OutlierMode::GroundTruth],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            batch: BatchSpec::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 10,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: 60 epochs with the decay window scaled to 30..60.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.apply_desk();
        cfg
    }

    pub fn apply_desk(&mut self) {
        self.optim.epochs = 60;
        self.optim.t0 = 30.0;
        self.optim.t1 = 60.0;
        self.optim.eps0 = DESK_EPS0;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.batch.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.batch.c > self.synth.n_cameras {
            return Err(Error::Config(format!(
                "batch.c = {} exceeds synth.n_cameras = {}",
                self.batch.c, self.synth.n_cameras
            )));
        }
        if self
            .sweep
            .fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::Config("sweep fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `output_dir`, unless overridden by [`OUTPUT_DIR_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

/// Initial learning rate of the desk preset.
pub const DESK_EPS0: f64 = 3e-3;
