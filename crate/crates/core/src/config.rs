//! Versioned TOML run configuration with `key=value` overrides.
//!
//! Every key has a default (see [`RunConfigFile::default`]); a file only
//! needs the keys it changes plus `schema_version`. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::BackboneConfig;
use crate::cmd::CmdConfig;
use crate::error::{Error, Result};
use crate::explain::OcclusionConfig;
use crate::fusion::{DsfConfig, LossWeights};
use crate::model::{ClassifierMode, ModelConfig};
use crate::tafe::StageSet;
use crate::task::Task;
use crate::trainer::{AugmentConfig, TrainConfig};
use crate::volumes::{Modality, PreprocessConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub task: Task,
    pub aux_tasks: Vec<Task>,
    pub modalities: Vec<Modality>,
    pub stages: StageSet,
    pub head: ClassifierMode,
    pub base_channels: usize,
    pub input_size: [usize; 3],
    pub dropout_rate: f64,
    pub seg_channels: usize,
    pub freeze_segmentation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub folds: usize,
    pub seed: u64,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Manifest CSV; empty means it must come from the command line.
    pub manifest: String,
    /// Cohort tag written into reports.
    pub cohort: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub fill: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    pub model: ModelSection,
    pub cmd: CmdConfig,
    pub dsf: DsfConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub augment: AugmentConfig,
    pub data: DataSection,
    pub explain: ExplainSection,
}

impl Default for RunConfigFile {
    /// The toy IDH setup: 32³ inputs, base width 8, all four sequences.
    fn default() -> Self {
        Self::from_model(&ModelConfig::toy(Task::Idh))
    }
}

impl RunConfigFile {
    pub fn from_model(m: &ModelConfig) -> Self {
        let t = TrainConfig::new(m.clone());
        let occ = OcclusionConfig::default();
        RunConfigFile {
            schema_version: SCHEMA_VERSION,
            model: ModelSection {
                task: m.task,
                aux_tasks: m.aux_tasks.clone(),
                modalities: m.modalities.clone(),
                stages: m.stages.clone(),
                head: m.head,
                base_channels: m.backbone.base_channels,
                input_size: m.backbone.input_size,
                dropout_rate: m.backbone.dropout_rate,
                seg_channels: m.backbone.seg_channels,
                freeze_segmentation: m.freeze_segmentation,
            },
            cmd: m.cmd.clone(),
            dsf: m.dsf.clone(),
            loss: m.loss,
            train: TrainSection {
                max_epochs: t.max_epochs,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                patience: t.patience,
                folds: t.folds,
                seed: t.seed,
                augment: t.augment.is_some(),
            },
            augment: AugmentConfig::default(),
            data: DataSection {
                manifest: String::new(),
                cohort: "default".into(),
            },
            explain: ExplainSection {
                patch: occ.patch,
                stride: occ.stride,
                fill: occ.fill,
                alpha: 0.5,
            },
        }
    }

    /// Parse TOML text, then apply `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid TOML: {e}")))?;
        match user.get("schema_version") {
            None => return Err(Error::config("schema_version is missing")),
            Some(Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
        }
        let mut merged = Table::try_from(RunConfigFile::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        merge(&mut merged, &user, "", &mut unknown);
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{ov}' is not key=value")))?;
            let key = key.trim();
            if !set_path(&mut merged, key, parse_value(raw.trim())) {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        let cfg: RunConfigFile = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.model_config()?;
        cfg.train_config()?.validate()?;
        Ok(cfg)
    }

    /// Defaults plus overrides, with no file.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::parse(&format!("schema_version = {SCHEMA_VERSION}"), overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            task: m.task,
            aux_tasks: m.aux_tasks.clone(),
            modalities: m.modalities.clone(),
            backbone: BackboneConfig {
                in_channels: m.modalities.len(),
                base_channels: m.base_channels,
                input_size: m.input_size,
                dropout_rate: m.dropout_rate,
                seg_channels: m.seg_channels,
            },
            stages: m.stages.clone(),
            head: m.head,
            cmd: self.cmd.clone(),
            dsf: self.dsf.clone(),
            loss: self.loss,
            freeze_segmentation: m.freeze_segmentation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            model: self.model_config()?,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            patience: t.patience,
            folds: t.folds,
            seed: t.seed,
            augment: t.augment.then(|| self.augment.clone()),
        })
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            target: self.model.input_size,
        }
    }

    pub fn occlusion(&self) -> OcclusionConfig {
        OcclusionConfig {
            patch: self.explain.patch,
            stride: self.explain.stride,
            fill: self.explain.fill,
        }
    }
}

/// Recursively copy `src` over `dst`, recording keys `dst` lacks.
fn merge(dst: &mut Table, src: &Table, prefix: &str, unknown: &mut Vec<String>) {
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(k), v) {
            (None, _) => unknown.push(key),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &key, unknown),
            (Some(slot), _) => *slot = v.clone(),
        }
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> bool {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = root;
    for p in parts {
        match t.get_mut(p) {
            Some(Value::Table(next)) => t = next,
            _ => return false,
        }
    }
    match t.get_mut(last) {
        Some(Value::Table(_)) | None => false,
        Some(slot) => {
            *slot = value;
            true
        }
    }
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
