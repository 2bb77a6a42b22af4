//! Run configuration: one JSON document with a section per module and a
//! global root seed.
//!
//! Component seeds descend from the root: `derive(seed, "data")` for the
//! generator, `derive(seed, "split")` for the holdout split and fold
//! assignment, `derive(seed, "train")` for training.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::GenConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::explain::ExplainConfig;
use crate::models::ModelConfig;
use crate::seed;
use crate::training::TrainConfig;

pub const RESOLVED_NAME: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.explain.target_class > 1 {
            return Err(Error::config("explain.target_class", "must be 0 or 1"));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        seed::derive(self.seed, "data")
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, "split")
    }

    pub fn train_seed(&self) -> u64 {
        seed::derive(self.seed, "train")
    }

    /// Parses and validates a config; unknown keys are rejected.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_error(e, origin))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Pretty JSON with every default filled in, newline terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Writes the resolved config into `dir` as `config.json`.
    pub fn save_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

fn config_error(e: serde_json::Error, origin: &Path) -> Error {
    let msg = e.to_string();
    // serde reports unknown fields as "unknown field `x`, expected ..."
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let key = rest.split('`').next().unwrap_or_default();
        return Error::config(key, format!("unknown key in {}", origin.display()));
    }
    Error::parse(origin, msg)
}
