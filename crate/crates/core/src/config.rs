//! Run configuration: key=value files plus command-line overrides.
//!
//! Unknown keys are rejected and every value is range-checked at parse time,
//! naming the offending line.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::contrastive::LossMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}` ({context})")]
    UnknownKey { key: String, context: String },
    #[error("cannot parse `{value}` for key `{key}` ({context})")]
    BadValue {
        key: String,
        value: String,
        context: String,
    },
    #[error("value out of range for `{key}`: {msg} ({context})")]
    Range {
        key: String,
        msg: String,
        context: String,
    },
    #[error("malformed config line ({context}): expected key=value")]
    Malformed { context: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every tunable of the pipeline. Defaults follow the stated training
/// hyperparameters wherever one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub embed_dim: usize,
    pub grid_size: usize,
    pub sa_layers: usize,
    pub mask_prob: f32,
    pub mask_len: usize,
    pub swap_prob: f32,
    pub tau: f32,
    pub tau_pred: f32,
    pub momentum: f32,
    pub queue_size: usize,
    pub mode: LossMode,
    pub topk: usize,
    pub batch_size: usize,
    pub epochs: u32,
    pub lr: f32,
    pub seed: u64,
    pub pred_loss_weight: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embed_dim: 32,
            grid_size: 4,
            sa_layers: 4,
            mask_prob: 0.08,
            mask_len: 10,
            swap_prob: 0.15,
            tau: 0.07,
            tau_pred: 0.1,
            momentum: 0.99,
            queue_size: 9600,
            mode: LossMode::InBatch,
            topk: 1,
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
            pred_loss_weight: 0.0,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::InBatch => write!(f, "in_batch"),
            LossMode::Queue => write!(f, "queue"),
        }
    }
}

impl RunConfig {
    /// Parse a key=value file ('#' starts a comment). Flag overrides are
    /// applied afterwards by the caller via [`RunConfig::set`].
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = RunConfig::default();
        for (ix, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let context = format!("{}:{}: `{}`", path.display(), ix + 1, raw.trim());
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed {
                    context: context.clone(),
                })?;
            cfg.set(key.trim(), value.trim(), &context)?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str, context: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str, context: &str) -> Result<T> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                context: context.into(),
            })
        }
        let range = |key: &str, msg: &str| ConfigError::Range {
            key: key.into(),
            msg: msg.into(),
            context: context.into(),
        };
        match key {
            "embed_dim" => {
                self.embed_dim = parse(key, value, context)?;
                if self.embed_dim == 0 {
                    return Err(range(key, "must be >= 1"));
                }
            }
            "grid_size" => {
                self.grid_size = parse(key, value, context)?;
                if self.grid_size == 0 {
                    return Err(range(key, "must be >= 1"));
                }
            }
            "sa_layers" => {
                self.sa_layers = parse(key, value, context)?;
                if self.sa_layers == 0 {
                    return Err(range(key, "must be >= 1"));
                }
            }
            "mask_prob" => {
                self.mask_prob = parse(key, value, context)?;
                if !(0.0..=1.0).contains(&self.mask_prob) {
                    return Err(range(key, "must lie in [0, 1]"));
                }
            }
            "mask_len" => {
                self.mask_len = parse(key, value, context)?;
                if self.mask_len == 0 {
                    return Err(range(key, "must be >= 1"));
                }
            }
            "swap_prob" => {
                self.swap_prob = parse(key, value, context)?;
                if !(0.0..=1.0).contains(&self.swap_prob) {
                    return Err(range(key, "must lie in [0, 1]"));
                }
            }
            "tau" => {
                self.tau = parse(key, value, context)?;
                if !(self.tau > 0.0) {
                    return Err(range(key, "must be > 0"));
                }
            }
            "tau_pred" => {
                self.tau_pred = parse(key, value, context)?;
                if !(self.tau_pred > 0.0) {
                    return Err(range(key, "must be > 0"));
                }
            }
            "momentum" => {
                self.momentum = parse(key, value, context)?;
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(range(key, "must lie in [0, 1)"));
                }
            }
            "queue_size" => {
                self.queue_size = parse(key, value, context)?;
                if self.queue_size == 0 {
                    return Err(range(key, "must be >= 1"));
                }
            }
            "mode" => {
                self.mode = match value {
                    "in_batch" => LossMode::InBatch,
                    "queue" => LossMode::Queue,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            context: context.into(),
                        })
                    }
                };
            }
            "topk" => {
                self.topk = parse(key, value, context)?;
                if self.topk == 0 {
                    return Err(range(key, "must be >= 1"));
                }
            }
            "batch_size" => {
                self.batch_size = parse(key, value, context)?;
                if self.batch_size < 2 {
                    return Err(range(key, "must be >= 2"));
                }
            }
            "epochs" => {
                self.epochs = parse(key, value, context)?;
            }
            "lr" => {
                self.lr = parse(key, value, context)?;
                if !(self.lr > 0.0) {
                    return Err(range(key, "must be > 0"));
                }
            }
            "seed" => {
                self.seed = parse(key, value, context)?;
            }
            "pred_loss_weight" => {
                self.pred_loss_weight = parse(key, value, context)?;
                if self.pred_loss_weight < 0.0 {
                    return Err(range(key, "must be >= 0"));
                }
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    context: context.into(),
                })
            }
        }
        Ok(())
    }

    /// Apply a `key=value` string, as received from a `--set` flag.
    pub fn set_kv(&mut self, kv: &str) -> Result<()> {
        let context = format!("--set {kv}");
        let (key, value) = kv.split_once('=').ok_or_else(|| ConfigError::Malformed {
            context: context.clone(),
        })?;
        self.set(key.trim(), value.trim(), &context)
    }
}
