use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::corpus::{default_buckets, format_buckets, parse_buckets, Bucket};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    InvalidValue { key: String, value: String },
    #[error("line {0:?} is not of the form key=value")]
    Syntax(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?} (expected config1, config2 or config3)")]
    UnknownPreset(String),
}

/// Hyperparameters of one model and its training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub rnn_size: usize,
    pub num_layers: usize,
    pub keep_probability: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub learning_rate_decay: f64,
    pub epochs: usize,
    pub beam_width: usize,
    pub buckets: Vec<Bucket>,
    pub reverse_source: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::config3()
    }
}

/// Keys accepted by [`ModelConfig::set`], in serialization order.
pub const CONFIG_KEYS: [&str; 13] = [
    "vocab_size",
    "embedding_size",
    "rnn_size",
    "num_layers",
    "keep_probability",
    "batch_size",
    "learning_rate",
    "min_learning_rate",
    "learning_rate_decay",
    "epochs",
    "beam_width",
    "buckets",
    "reverse_source",
];

impl ModelConfig {
    fn table(batch: usize, width: usize, epochs: usize, keep: f64) -> Self {
        Self {
            vocab_size: 6286,
            embedding_size: width,
            rnn_size: width,
            num_layers: 1,
            keep_probability: keep,
            batch_size: batch,
            learning_rate: 0.001,
            min_learning_rate: 0.0001,
            learning_rate_decay: 0.9,
            epochs,
            beam_width: 1,
            buckets: default_buckets(),
            reverse_source: true,
        }
    }

    pub fn config1() -> Self {
        Self::table(128, 128, 500, 0.75)
    }

    pub fn config2() -> Self {
        Self::table(512, 512, 100, 0.75)
    }

    pub fn config3() -> Self {
        Self::table(32, 1024, 50, 0.7)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "config1" => Ok(Self::config1()),
            "config2" => Ok(Self::config2()),
            "config3" => Ok(Self::config3()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    // Negated comparisons so NaN fails too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if [self.vocab_size, self.embedding_size, self.rnn_size, self.num_layers, self.batch_size, self.beam_width]
            .contains(&0)
        {
            return bad("sizes, layer count, batch size and beam width must be at least 1");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the four special tokens");
        }
        if !(self.keep_probability > 0.0 && self.keep_probability <= 1.0) {
            return bad("keep_probability must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.min_learning_rate > self.learning_rate {
            return bad("min_learning_rate must not exceed learning_rate");
        }
        if !(self.learning_rate_decay > 0.0 && self.learning_rate_decay <= 1.0) {
            return bad("learning_rate_decay must be in (0, 1]");
        }
        if self.buckets.is_empty() {
            return bad("at least one bucket is required");
        }
        Ok(())
    }

    /// Number of scalar parameters a model of this shape holds.
    /// Saturates at `usize::MAX` for absurd shapes.
    pub fn parameter_count(&self) -> usize {
        let dims = [self.vocab_size, self.embedding_size, self.rnn_size, self.num_layers];
        if dims.iter().any(|&d| d as u128 > u32::MAX as u128) {
            return usize::MAX;
        }
        let [v, e, r, l] = dims.map(|x| x as u128);
        let lstm = |input: u128| 4 * r * (input + r + 1);
        let encoder = 2 * (lstm(e) + l.saturating_sub(1) * lstm(2 * r));
        let decoder = lstm(e + 2 * r) + l.saturating_sub(1) * lstm(r);
        let total = v * e + encoder + l * 2 * r * r + decoder + 3 * r * r + r + v * r + v;
        usize::try_from(total).unwrap_or(usize::MAX)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = || ConfigError::InvalidValue { key: key.to_string(), value: value.to_string() };
        let v = value.trim();
        fn num<N: core::str::FromStr>(v: &str, e: impl Fn() -> ConfigError) -> Result<N, ConfigError> {
            v.parse().map_err(|_| e())
        }
        match key.trim() {
            "vocab_size" => self.vocab_size = num(v, invalid)?,
            "embedding_size" => self.embedding_size = num(v, invalid)?,
            "rnn_size" => self.rnn_size = num(v, invalid)?,
            "num_layers" => self.num_layers = num(v, invalid)?,
            "keep_probability" => self.keep_probability = num(v, invalid)?,
            "batch_size" => self.batch_size = num(v, invalid)?,
            "learning_rate" => self.learning_rate = num(v, invalid)?,
            "min_learning_rate" => self.min_learning_rate = num(v, invalid)?,
            "learning_rate_decay" => self.learning_rate_decay = num(v, invalid)?,
            "epochs" => self.epochs = num(v, invalid)?,
            "beam_width" => self.beam_width = num(v, invalid)?,
            "buckets" => self.buckets = parse_buckets(v).map_err(|_| invalid())?,
            "reverse_source" => {
                self.reverse_source = match v {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(invalid()),
                }
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax(line.to_string()))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv_lines(&self) -> Vec<String> {
        CONFIG_KEYS.iter().map(|k| format!("{k}={}", self.value_of(k))).collect()
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "vocab_size" => self.vocab_size.to_string(),
            "embedding_size" => self.embedding_size.to_string(),
            "rnn_size" => self.rnn_size.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "keep_probability" => format!("{:?}", self.keep_probability),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "min_learning_rate" => format!("{:?}", self.min_learning_rate),
            "learning_rate_decay" => format!("{:?}", self.learning_rate_decay),
            "epochs" => self.epochs.to_string(),
            "beam_width" => self.beam_width.to_string(),
            "buckets" => format_buckets(&self.buckets),
            "reverse_source" => self.reverse_source.to_string(),
            _ => unreachable!("not a config key: {key}"),
        }
    }
}
