//! Run configuration: model, optimization and data settings, read from a
//! TOML file of dotted keys with `key=value` overrides layered on top.
//!
//! ```toml
//! model.d_model = 64
//! model.mixing = "kron-kron/dns-dns"
//! train.steps = 500
//! data.corpus = "data/moby_dick.txt"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Training window length; defaults to `model.max_seq_len`.
    pub seq_len: Option<usize>,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    /// Validation cadence in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Cap on validation windows per evaluation.
    pub eval_windows: Option<usize>,
    pub checkpoint_every: u64,
    /// Seed of the batch shuffler.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 32,
            seq_len: None,
            lr: 3e-4,
            min_lr: 3e-5,
            warmup_steps: 1000,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            eval_every: 500,
            eval_windows: None,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training text.
    pub corpus: Option<PathBuf>,
    /// Validation text; when absent the tail of the corpus is held out.
    pub val: Option<PathBuf>,
    /// Tokenizer file from `bpe-train`; byte-level when absent.
    pub vocab: Option<PathBuf>,
    pub val_fraction: Option<f64>,
}

impl DataConfig {
    pub fn val_fraction(&self) -> f64 {
        self.val_fraction.unwrap_or(0.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as TOML, falling back to a bare string so
/// `model.mixing=kron-kron/dns-dns` needs no quoting.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_err(format!("empty key in override {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), override_value(v.trim()))?;
        }
        let cfg: RunConfig = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths are resolved against the
    /// file's directory only if they do not exist relative to the working
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
            .map(|mut c| {
                if let Some(dir) = path.parent() {
                    for p in [&mut c.data.corpus, &mut c.data.val, &mut c.data.vocab].into_iter().flatten() {
                        if p.is_relative() && !p.exists() && dir.join(&*p).exists() {
                            *p = dir.join(&*p);
                        }
                    }
                }
                c
            })
    }

    pub fn seq_len(&self) -> usize {
        self.train.seq_len.unwrap_or(self.model.max_seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size must be positive"));
        }
        let seq = self.seq_len();
        if seq == 0 || seq > self.model.max_seq_len {
            return Err(config_err(format!(
                "train.seq_len = {seq} must be in 1..={}",
                self.model.max_seq_len
            )));
        }
        if !(t.lr > 0.0) || !(t.min_lr >= 0.0) || t.min_lr > t.lr {
            return Err(config_err("need 0 <= train.min_lr <= train.lr and train.lr > 0"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(config_err("train.beta1 and train.beta2 must be in [0, 1)"));
        }
        if !(t.eps > 0.0) || !(t.weight_decay >= 0.0) || !(t.grad_clip > 0.0) {
            return Err(config_err("train.eps and train.grad_clip must be positive, train.weight_decay >= 0"));
        }
        if let Some(f) = self.data.val_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(config_err("data.val_fraction must be in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Sets both the initialization and the shuffling seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}
