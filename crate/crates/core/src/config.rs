//! Experiment configuration: a flat text file of dotted keys
//! (`data.sigma = 0.1`), parsed as TOML.
//!
//! Every key is optional and falls back to its default, so an empty file is
//! a valid configuration. Unknown keys and ill-typed values are rejected with
//! an error naming the offending dotted key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::analysis::Thresholds;
use crate::datagen::DataConfig;
use crate::error::{Error, Result};
use crate::io::read_file;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankSweepConfig {
    pub ranks: Vec<usize>,
}

impl Default for RankSweepConfig {
    fn default() -> Self {
        RankSweepConfig { ranks: vec![1, 2, 5, 10, 20] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSweepConfig {
    pub rates: Vec<f64>,
}

impl Default for PruneSweepConfig {
    fn default() -> Self {
        PruneSweepConfig {
            rates: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { trials: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: Thresholds,
    pub rank_sweep: RankSweepConfig,
    pub prune_sweep: PruneSweepConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            analysis: Thresholds::default(),
            rank_sweep: RankSweepConfig::default(),
            prune_sweep: PruneSweepConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            message: "config is not valid UTF-8".into(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Parses config text, fills defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let user: Table = text.parse().map_err(|e: toml::de::Error| Error::Format {
            path: PathBuf::from("<config>"),
            message: e.message().to_string(),
        })?;
        let mut user_leaves = BTreeMap::new();
        flatten("", &Value::Table(user), &mut user_leaves);

        let defaults = Self::default().to_flat()?;
        let mut merged = defaults.clone();
        for (key, value) in user_leaves {
            let Some(default) = defaults.get(&key) else {
                return Err(Error::validation(key, "unknown key"));
            };
            let value = coerce(value, default);
            merged.insert(key.clone(), value);
            // Deserializing after every insertion pins a type error on the key that caused it.
            if let Err(e) = Self::from_flat(&merged) {
                return Err(Error::validation(key, e.message().to_string()));
            }
        }
        let config = Self::from_flat(&merged).map_err(|e| Error::validation("<config>", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate(self.data.n_train)?;
        self.analysis.validate()?;
        if self.rank_sweep.ranks.is_empty() || self.rank_sweep.ranks.contains(&0) {
            return Err(Error::validation("rank_sweep.ranks", "need a nonempty list of ranks >= 1"));
        }
        let rates = &self.prune_sweep.rates;
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::validation("prune_sweep.rates", "rates must lie in [0, 1]"));
        }
        if rates.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::validation("prune_sweep.rates", "rates must be sorted ascending"));
        }
        if self.grad_check.trials == 0 {
            return Err(Error::validation("grad_check.trials", "need at least one trial"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::validation("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Sets every seed in the config to `seed`. The random streams stay
    /// distinct because each consumer draws from its own stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.grad_check.seed = seed;
    }

    /// All resolved values as sorted `key = value` lines. Parsing this text
    /// gives back an identical config.
    pub fn resolved_text(&self) -> Result<String> {
        let mut out = String::new();
        for (key, value) in self.to_flat()? {
            out.push_str(&format!("{key} = {value}\n"));
        }
        Ok(out)
    }

    /// First 12 hex digits of the SHA-256 of [`resolved_text`](Self::resolved_text),
    /// with `output_dir` left out so relocating a run keeps its hash.
    pub fn hash(&self) -> Result<String> {
        let mut located = self.clone();
        located.output_dir = PathBuf::from("out");
        let digest = Sha256::digest(located.resolved_text()?.as_bytes());
        Ok(hex::encode(digest)[..12].to_string())
    }

    fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let value = Value::try_from(self).map_err(|e| Error::InvalidInput(format!("serializing config: {e}")))?;
        let mut out = BTreeMap::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> std::result::Result<Self, toml::de::Error> {
        let mut root = Table::new();
        for (key, value) in flat {
            let mut table = &mut root;
            let mut parts = key.split('.').peekable();
            while let Some(part) = parts.next() {
                if parts.peek().is_none() {
                    table.insert(part.to_string(), value.clone());
                } else {
                    table = table
                        .entry(part.to_string())
                        .or_insert_with(|| Value::Table(Table::new()))
                        .as_table_mut()
                        .expect("config sections are tables");
                }
            }
        }
        Value::Table(root).try_into()
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Table(t) if prefix.is_empty() || !t.is_empty() => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

/// Lets `sigma = 1` stand for `sigma = 1.0` wherever the default is a float.
fn coerce(value: Value, default: &Value) -> Value {
    match (&value, default) {
        (Value::Integer(i), Value::Float(_)) => Value::Float(*i as f64),
        (Value::Array(items), Value::Array(d)) if d.first().is_some_and(Value::is_float) => Value::Array(
            items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) => Value::Float(*i as f64),
                    other => other.clone(),
                })
                .collect(),
        ),
        _ => value,
    }
}
