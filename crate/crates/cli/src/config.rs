//! Run configuration: one strict JSON document with per-stage sections.

use std::path::{Path, PathBuf};

use armorbench_core::advtrain::Mix;
use armorbench_core::data::{Normalization, SyntheticStyle};
use armorbench_core::detectors::{DetectorKind, DetectorParams, SweepGrid};
use armorbench_core::model::TrainConfig;
use armorbench_core::AttackConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Keys without defaults.
pub const REQUIRED_KEYS: [&str; 3] = ["data", "output_dir", "seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every stage seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    /// Worker threads for per-sample parallelism (0 = all cores).
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub log_timestamps: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub advtrain: AdvTrainSection,
    #[serde(default)]
    pub detectors: DetectorSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataKind,
    /// CIFAR-10 binary batch file.
    pub path: Option<PathBuf>,
    /// Keep only the first `limit` CIFAR-10 records.
    pub limit: Option<usize>,
    pub n: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub style: SyntheticStyle,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataKind::Synthetic,
            path: None,
            limit: None,
            n: 2500,
            num_classes: 10,
            height: 32,
            width: 32,
            style: SyntheticStyle::default(),
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 128,
            embed_dim: 64,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvTrainSection {
    /// Composition of the adversarial training set.
    pub mix: Mix,
    /// Composition of the adversarial validation set.
    pub val_mix: Mix,
    pub train: TrainConfig,
}

impl Default for AdvTrainSection {
    fn default() -> Self {
        AdvTrainSection {
            mix: Mix::default(),
            val_mix: Mix {
                clean: 0.0,
                sequential: 0.5,
                fused: 0.5,
            },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    Baseline,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub params: DetectorParams,
    /// Training images whose clean and attacked versions form the training rows.
    pub train_samples: usize,
    /// Checkpoint whose encoder produces the features.
    pub encoder: Encoder,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            params: DetectorParams::default(),
            train_samples: 500,
            encoder: Encoder::Baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub grid: SweepGrid,
    pub kinds: Vec<DetectorKind>,
    /// Boosting rounds per sweep cell (AdaBoost rounds, GBDT trees).
    pub rounds: usize,
    pub mlp_epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            grid: SweepGrid::default(),
            kinds: DetectorKind::ALL.to_vec(),
            rounds: 20,
            mlp_epochs: 50,
        }
    }
}

impl RunConfig {
    /// Smallest valid config: the three required keys, everything else default.
    pub fn minimal(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            seed,
            output_dir: output_dir.into(),
            data: DataConfig::default(),
            threads: 0,
            log_timestamps: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            advtrain: AdvTrainSection::default(),
            detectors: DetectorSection::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: armorbench_core::Error| CliError::config(None, e.to_string());
        let d = &self.data;
        if d.source == DataKind::Cifar10 && d.path.is_none() {
            return Err(CliError::config(Some("data.path"), "cifar10 source needs a path"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(CliError::config(Some("data.train_fraction"), "must lie in (0, 1)"));
        }
        if self.model.hidden_dim == 0 || self.model.embed_dim == 0 {
            return Err(CliError::config(
                Some("model"),
                "hidden_dim and embed_dim must be positive",
            ));
        }
        self.model.normalization.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.attack.validate().map_err(wrap)?;
        self.advtrain.mix.validate().map_err(wrap)?;
        self.advtrain.val_mix.validate().map_err(wrap)?;
        self.advtrain.train.validate().map_err(wrap)?;
        let p = &self.detectors.params;
        p.adaboost.validate().map_err(wrap)?;
        p.gbdt_level.validate().map_err(wrap)?;
        p.gbdt_leaf.validate().map_err(wrap)?;
        p.mlp.validate().map_err(wrap)?;
        if self.detectors.train_samples == 0 {
            return Err(CliError::config(Some("detectors.train_samples"), "must be positive"));
        }
        if self.sweep.rounds == 0 || self.sweep.mlp_epochs == 0 {
            return Err(CliError::config(
                Some("sweep"),
                "rounds and mlp_epochs must be positive",
            ));
        }
        Ok(())
    }
}

/// Parse a config document strictly: unknown keys and type mismatches are
/// errors carrying the JSON path; missing required keys are listed together.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::config(None, format!("invalid JSON: {e}")))?;
    let Some(obj) = value.as_object() else {
        return Err(CliError::config(None, "config must be a JSON object"));
    };
    let missing: Vec<&str> = REQUIRED_KEYS
        .iter()
        .copied()
        .filter(|k| !obj.contains_key(*k))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::config(
            None,
            format!("missing required keys: {}", missing.join(", ")),
        ));
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(Some(&path), e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config(&text)
}

/// Fully expanded config as pretty JSON with sorted keys.
pub fn dump(cfg: &RunConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
    s.push('\n');
    s
}

/// Flag overrides; flag beats config beats default.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub epsilon: Option<f64>,
    pub timestamps: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.output_dir {
            cfg.output_dir = p.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(e) = self.epsilon {
            cfg.attack.epsilon = e;
        }
        cfg.log_timestamps |= self.timestamps;
        cfg.validate()
    }
}

/// Rows of the documented defaults table: (key, default).
pub fn defaults_table() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut value = serde_json::to_value(RunConfig::minimal(0, "out")).expect("config serializes");
    let obj = value.as_object_mut().expect("object");
    for k in REQUIRED_KEYS {
        if k != "data" {
            obj.remove(k);
        }
    }
    let mut out = Vec::new();
    walk("", &value, &mut out);
    out
}
