//! Experiment configuration files and seed resolution.

use std::fs;
use std::path::Path;

use anyhow::Context;
use fairwell::data::SplitFractions;
use fairwell::encoders::json_hash;
use fairwell::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;
use crate::manifest::MANIFEST_FORMAT;

pub const SEED_ENV: &str = "FAIRWELL_SEED";

/// Everything `pretrain` and `evaluate` need besides the data.
///
/// ```json
/// {
///   "train": { "method": "m2", "pooling": "single", "epochs": 20, "seed": 7 },
///   "split": { "train": 0.7, "val": 0.15, "test": 0.15 },
///   "numerator_group": "M"
/// }
/// ```
///
/// Every field is optional; the resolved file written to a run directory
/// has all of them filled in.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub split: SplitFractions,
    /// Group whose rates go in the numerator of the fairness ratios.
    /// `None` picks the minority group of the test predictions.
    pub numerator_group: Option<String>,
}

impl ExperimentConfig {
    /// Stable identifier of a resolved configuration.
    pub fn run_id(&self) -> String {
        let hash = json_hash(self);
        format!("{}-{}-seed{}-{}", self.train.method, self.train.pooling, self.train.seed, &hash[..8])
    }
}

/// A config file as JSON plus the seed it sets, if any.
#[derive(Debug, Clone)]
pub struct RawConfig {
    pub value: Value,
    pub seed: Option<u64>,
}

/// Reads a JSON config file. A run manifest is accepted too, in which case
/// its resolved config is used.
pub fn read_config(path: &Path, seed_pointer: &str) -> anyhow::Result<RawConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if value.get("manifest_format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
        value = value.get("config").cloned().unwrap_or(Value::Null);
    }
    if !value.is_object() {
        return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())).into());
    }
    let seed = match value.pointer(seed_pointer) {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| CliError::Usage(format!("`{seed_pointer}` must be a non-negative integer")))?),
    };
    Ok(RawConfig { value, seed })
}

pub fn parse<T: for<'de> Deserialize<'de>>(raw: &RawConfig, what: &str) -> anyhow::Result<T> {
    serde_json::from_value(raw.value.clone()).map_err(|e| CliError::Usage(format!("invalid {what} config: {e}")).into())
}

/// `--seed` wins over the config file, which wins over the environment.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> anyhow::Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        None => Ok(0),
        Some(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{s}` is not a non-negative integer")).into()),
    }
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}
