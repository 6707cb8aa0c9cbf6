//! Run configuration: one JSON document with a section per stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::finetune::FinetuneConfig;
use crate::meta::MetaConfig;
use crate::model::ModelConfig;
use crate::synth::{BenchmarkConfig, Split};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "GRMP_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected section.field=value")]
    Override(String),
    #[error("invalid config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("{SEED_ENV}={0} is not an unsigned integer")]
    SeedEnv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Split scored by zero-shot evaluation.
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: BenchmarkConfig,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Applies `section.field=value` assignments. Values are parsed as JSON
    /// and fall back to a plain string, so `data.train_fraction=0.7` and
    /// `meta.optimizer=sgd` both work.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a.split_once('=').ok_or_else(|| ConfigError::Override(a.into()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let known = slot.as_object().is_some_and(|o| o.contains_key(*part));
                if !known {
                    return Err(ConfigError::Field {
                        field: parts[..=i].join("."),
                        message: "unknown field".into(),
                    });
                }
                slot = slot.get_mut(*part).expect("checked");
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Replaces the seed when [`SEED_ENV`] is set.
    pub fn with_seed_env(mut self, value: Option<&str>) -> Result<Self, ConfigError> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| ConfigError::SeedEnv(v.into()))?;
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
