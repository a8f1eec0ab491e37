//! Run configuration: model, encoder, dataset and training settings in one
//! flat file of `section.key = value` lines, overridable from the command
//! line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tsal_core::datapipe::DatasetConfig;
use tsal_core::encoders::EncoderConfig;
use tsal_core::model::{ModelConfig, ModelSpec, TrainConfig};
use tsal_core::tensor::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.optim.lr,
            weight_decay: t.optim.weight_decay,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub dataset: DatasetConfig,
    pub train: TrainSettings,
}

impl RunConfig {
    /// Reads an optional config file, then applies `key=value` overrides in
    /// order. Values are TOML literals; anything that does not parse as one
    /// is taken as a string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                bail!("override {o:?} is not key=value");
            };
            set_path(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.model.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch,
            optim: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }

    /// The configuration as flat `section.key = value` lines.
    pub fn to_flat(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }
}

fn parse_value(s: &str) -> toml::Value {
    format!("v = {s}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).with_context(|| format!("empty key in {key:?}"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{p} in {key:?} is not a section"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}
