//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Sequence length of the timed forwards.
    pub seq_len: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Sequence length of the closed-form attention FLOP comparison.
    pub flop_seq_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_len: 512,
            repeats: 5,
            warmup: 1,
            flop_seq_len: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let b = &self.bench;
        if b.repeats < 3 || b.warmup < 1 {
            return Err(Error::Config("bench needs repeats >= 3 and warmup >= 1".into()));
        }
        if b.seq_len == 0 || b.flop_seq_len == 0 {
            return Err(Error::Config("bench sequence lengths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
