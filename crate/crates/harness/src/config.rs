//! Experiment configuration: JSON (canonical) or flat `key = value` files.
//!
//! Flat files use dotted keys; numeric segments index into lists:
//!
//! ```text
//! n_runs = 20
//! env.link.kind = logistic
//! env.dim = 10
//! policies.0.algorithm = fp
//! policies.0.link.kind = logistic
//! ```
//!
//! Values that parse as JSON (numbers, booleans, quoted strings) are taken as
//! such; anything else is a bare string.

use std::path::{Path, PathBuf};

use fp_bandits::{EnvConfig, PolicyConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Flat { line: usize, message: String },
    #[error("invalid config: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub policies: Vec<PolicyConfig>,
    #[serde(default = "one")]
    pub n_runs: u64,
    /// Run `r` uses seed `base_seed + r`.
    #[serde(default)]
    pub base_seed: u64,
    /// Output directory; nothing is written when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Record `mu'(x_{t*}^T theta*)` per round and the instance constants.
    #[serde(default = "yes")]
    pub record_diagnostics: bool,
    /// Keep per-round traces and write `trace.csv`.
    #[serde(default = "yes")]
    pub record_traces: bool,
    /// Rounds between flushes of `trace.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(env: EnvConfig, policies: Vec<PolicyConfig>, n_runs: u64, base_seed: u64) -> Self {
        Self {
            env,
            policies,
            n_runs,
            base_seed,
            output: None,
            record_diagnostics: true,
            record_traces: true,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n_runs < 1 {
            return Err(ConfigError::Invalid("n_runs must be at least 1".into()));
        }
        if self.policies.is_empty() {
            return Err(ConfigError::Invalid("at least one policy is required".into()));
        }
        let mut labels: Vec<String> = self.policies.iter().map(|p| p.label()).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid(
                "policy labels must be distinct; set `name`".into(),
            ));
        }
        for p in &self.policies {
            p.validate()
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.label())))?;
        }
        if self.checkpoint_every == Some(0) {
            return Err(ConfigError::Invalid("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Compact JSON used for hashing and `meta.json`.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Parses JSON when the text starts with `{`, the flat format otherwise.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text)?
    } else {
        parse_flat(text)?
    };
    let cfg: ExperimentConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Flat `a.b.0.c = v` lines to a JSON tree.
pub fn parse_flat(text: &str) -> Result<Value, ConfigError> {
    let mut root = Value::Object(Map::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, val) = content.split_once('=').ok_or_else(|| ConfigError::Flat {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ConfigError::Flat {
                line,
                message: format!("malformed key `{key}`"),
            });
        }
        let val = val.trim();
        let value = serde_json::from_str::<Value>(val).unwrap_or_else(|_| Value::String(val.to_string()));
        let segments: Vec<&str> = key.split('.').collect();
        insert(&mut root, &segments, value).map_err(|message| ConfigError::Flat { line, message })?;
    }
    Ok(root)
}

fn insert(node: &mut Value, path: &[&str], value: Value) -> Result<(), String> {
    let (head, rest) = path.split_first().expect("non-empty path");
    let slot = match head.parse::<usize>() {
        Ok(idx) => {
            if node.is_null() {
                *node = Value::Array(Vec::new());
            }
            let arr = node
                .as_array_mut()
                .ok_or_else(|| format!("`{head}` indexes a non-list"))?;
            if arr.len() <= idx {
                arr.resize(idx + 1, Value::Null);
            }
            &mut arr[idx]
        }
        Err(_) => {
            if node.is_null() {
                *node = Value::Object(Map::new());
            }
            let obj = node
                .as_object_mut()
                .ok_or_else(|| format!("`{head}` keys into a non-table"))?;
            obj.entry(head.to_string()).or_insert(Value::Null)
        }
    };
    if rest.is_empty() {
        if !slot.is_null() {
            return Err(format!("duplicate key `{head}`"));
        }
        *slot = value;
        Ok(())
    } else {
        insert(slot, rest, value)
    }
}
