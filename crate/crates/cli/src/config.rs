//! Flat `key = value` run configuration. Later sources override earlier
//! ones: file, then `SLAF_*` environment variables, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use slaf::trainer::TrainConfig;
use slaf::transformer::ModelConfig;

pub const MODEL_KEYS: [&str; 9] = [
    "d_model",
    "n_heads",
    "n_enc_layers",
    "n_dec_layers",
    "d_ffn",
    "max_positions",
    "dropout",
    "unidirectional_encoder",
    "length_classes",
];

pub const DATA_KEYS: [&str; 5] = ["train_src", "train_tgt", "valid_src", "valid_tgt", "min_freq"];

pub const OUTPUT_KEYS: [&str; 2] = ["checkpoint", "log"];

pub const ENV_PREFIX: &str = "SLAF_";

pub const DEFAULT_MIN_FREQ: usize = 5;

/// Every accepted key.
pub fn valid_keys() -> Vec<&'static str> {
    MODEL_KEYS
        .iter()
        .chain(TrainConfig::KEYS.iter())
        .chain(DATA_KEYS.iter())
        .chain(OUTPUT_KEYS.iter())
        .copied()
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !valid_keys().contains(&key) {
            bail!("unknown key {key:?}; valid keys: {}", valid_keys().join(", "));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(k, v).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// `SLAF_SEED=7` sets `seed`.
    pub fn merge_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                self.set(&key.to_ascii_lowercase(), &v)
                    .with_context(|| format!("environment variable {k}"))?;
            }
        }
        Ok(())
    }

    /// `key=value` pairs as given to `--set`.
    pub fn merge_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| anyhow!("expected key=value, got {p:?}"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| anyhow!("missing required key {key}"))
    }

    pub fn min_freq(&self) -> Result<usize> {
        self.get("min_freq")
            .map_or(Ok(DEFAULT_MIN_FREQ), str::parse)
            .map_err(|_| anyhow!("bad value for min_freq"))
    }

    /// Model settings with the given vocabulary sizes. `length_classes`
    /// defaults to `max_positions`.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
        let mut text: String = MODEL_KEYS
            .iter()
            .filter_map(|k| self.get(k).map(|v| format!("{k} = {v}\n")))
            .collect();
        if self.get("length_classes").is_none() {
            let max = self.get("max_positions").unwrap_or("256");
            text.push_str(&format!("length_classes = {max}\n"));
        }
        text.push_str(&format!("src_vocab = {src_vocab}\ntgt_vocab = {tgt_vocab}\n"));
        let cfg = ModelConfig::from_kv(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for k in TrainConfig::KEYS {
            if let Some(v) = self.get(k) {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
