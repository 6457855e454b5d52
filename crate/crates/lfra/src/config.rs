//! Run configuration: defaults, then command-line flags, then a TOML config
//! file (which wins over flags).

use std::fs;
use std::path::{Path, PathBuf};

use lfra_core::data::DatasetSpec;
use lfra_core::model::ModelConfig;
use lfra_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Model fields whose values are comma-separated lists.
const LIST_KEYS: [&str; 3] = ["channels", "focal_kernels", "raam_skips"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    /// `drive`, `stare`, `chase` or `custom`.
    pub dataset: String,
    pub preset: String,
    pub out: PathBuf,
    /// Root seed for initialization, shuffling, dropout, augmentation and
    /// splitting.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
    pub fov_only: bool,
    /// Checkpoint directory to read (eval, predict); defaults to `out/ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Square preprocessing size; defaults to the dataset's target size.
    pub size: Option<usize>,
    pub patience: Option<usize>,
    /// Augmented training-set size; defaults to the dataset's published
    /// count (none for `custom`).
    pub augment: Option<usize>,
    /// Per-field overrides of the preset's model configuration.
    pub model: Table,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            dataset_root: None,
            dataset: "custom".into(),
            preset: "default".into(),
            out: PathBuf::from("lfra-out"),
            seed: 0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            threshold: lfra_core::metrics::DEFAULT_THRESHOLD,
            fov_only: false,
            checkpoint: None,
            size: None,
            patience: None,
            augment: None,
            model: Table::new(),
        }
    }
}

fn overlay(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, overridden by `flags`, overridden by the TOML file at
    /// `file`.
    pub fn resolve(flags: Table, file: Option<&Path>) -> Result<Self> {
        let mut table = Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut table, flags);
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(Error::io(path))?;
            let parsed: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
            overlay(&mut table, parsed);
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec()?;
        self.train_config().validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.size == Some(0) {
            return Err(Error::Config("size must be positive".into()));
        }
        self.model_config()?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec::by_name(&self.dataset)?)
    }

    pub fn target_size(&self) -> Result<usize> {
        Ok(self.size.unwrap_or(self.dataset_spec()?.target_size))
    }

    /// Preset, then the `[model]` overrides; the seed is always the run
    /// seed.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        let mut kv = String::new();
        for (k, v) in &self.model {
            let text = match v {
                Value::Array(items) => items.iter().map(scalar_text).collect::<Result<Vec<_>>>()?.join(","),
                other => scalar_text(other)?,
            };
            kv.push_str(&format!("{k}={text}\n"));
        }
        cfg.apply_kv(&kv)?;
        cfg.seed = self.seed;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            patience: self.patience,
            ..TrainConfig::default()
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("ckpt"))
    }

    /// This configuration with every model field spelled out, as TOML. Fed
    /// back through `--config` it reproduces the run.
    pub fn effective_toml(&self) -> Result<String> {
        let model = self.model_config()?;
        let mut frozen = self.clone();
        frozen.model = Table::new();
        for line in model.to_kv().lines() {
            let (k, v) = line.split_once('=').expect("to_kv emits key=value");
            if k == "seed" {
                continue;
            }
            frozen.model.insert(k.to_string(), kv_value(k, v));
        }
        toml::to_string(&frozen).map_err(|e| Error::Config(e.to_string()))
    }
}

fn scalar_text(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => format!("{f:?}"),
        Value::Boolean(b) => b.to_string(),
        other => return Err(Error::Config(format!("unsupported model value {other}"))),
    })
}

fn kv_value(key: &str, v: &str) -> Value {
    if LIST_KEYS.contains(&key) {
        let items = v
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| Value::Integer(s.parse().expect("list entries are integers")))
            .collect();
        return Value::Array(items);
    }
    if let Ok(i) = v.parse::<i64>() {
        Value::Integer(i)
    } else if let Ok(f) = v.parse::<f64>() {
        Value::Float(f)
    } else if let Ok(b) = v.parse::<bool>() {
        Value::Boolean(b)
    } else {
        Value::String(v.to_string())
    }
}
