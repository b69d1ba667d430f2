//! Run configuration: a TOML document with `[model]`, `[train]`, `[task]`,
//! and `[run]` sections, strict about unknown keys, plus dotted-key
//! overrides applied before deserialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HgrnError, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    /// Metrics/eval logging interval in steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Fraction of a byte corpus used for training (rest is validation).
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    /// Corpus file for byte_lm tasks.
    #[serde(default)]
    pub corpus: Option<String>,
}

fn default_log_every() -> usize {
    100
}
fn default_split() -> f64 {
    0.9
}

impl Default for RunSettings {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub run: RunSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.model.vocab_size < self.task.vocab_size {
            return Err(HgrnError::Config(format!(
                "model vocab_size {} smaller than task vocab_size {}",
                self.model.vocab_size, self.task.vocab_size
            )));
        }
        Ok(())
    }

    /// Parses TOML text, applies `key.path=value` overrides, then
    /// deserializes strictly (unknown keys are rejected by name).
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| HgrnError::Config(format!("config parse error: {e}")))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| HgrnError::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HgrnError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text, overrides)
    }

    /// The resolved configuration, serialized for logging alongside a run.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| HgrnError::Config(format!("config serialization failed: {e}")))
    }
}

/// Sets `value[a][b][c] = parsed(raw)` for a dotted key `a.b.c`, creating
/// intermediate tables as needed. The raw value is parsed as TOML when
/// possible and falls back to a string.
fn apply_override(value: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HgrnError::Config(format!("malformed override key {key:?}")));
    }
    let mut node = value;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| HgrnError::Config(format!("override {key:?}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        HgrnError::Config(format!("override {key:?} does not address a table entry"))
    })?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    };
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
