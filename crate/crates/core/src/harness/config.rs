use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AblationVariant, HarnessError};
use crate::graphs::{generate_synthetic, load_dataset, ContextModel, Dataset, SynthScenario};
use crate::rng::derive_seed;
use crate::trainer::{split_validation, SweepAxis, TrainConfig};

/// Where samples come from: a JSONL file or a synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SynthScenario>,
    /// Number of synthetic samples.
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_n() -> usize {
    2000
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: Some(SynthScenario::default()),
            n: default_n(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterveneConfig {
    pub batch_sizes: Vec<usize>,
    pub shuffle: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for InterveneConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![8, 16, 32],
            shuffle: vec![false, true],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Depth(vec![1, 3, 5, 9]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// 1-based layers; defaults to first, middle and last.
    pub layers: Option<Vec<usize>>,
    /// How many test samples to render.
    pub samples: usize,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            layers: None,
            samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: AblationVariant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a command needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Restricts the dataset to these views, in this order.
    pub views: Option<Vec<String>>,
    pub data: DataConfig,
    /// Batch context; defaults to the synthetic scenario's, or none for files.
    pub context: Option<ContextModel>,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub intervene: InterveneConfig,
    pub sweep: SweepConfig,
    pub saliency: SaliencyConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            views: None,
            data: DataConfig::default(),
            context: None,
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            intervene: InterveneConfig::default(),
            sweep: SweepConfig::default(),
            saliency: SaliencyConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Parses a config; relative data paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .strip_prefix("unknown field `")
                .and_then(|r| r.split('`').next())
                .unwrap_or("<file>")
                .to_string();
            HarnessError::Config { field, reason: msg }
        })?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(config_err("data", "set either path or synthetic, not both")),
            (None, None) => return Err(config_err("data", "set either path or synthetic")),
            (Some(p), None) if !p.exists() => {
                return Err(config_err("data.path", format!("{} does not exist", p.display())))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.split.test_fraction) {
            return Err(config_err("split.test_fraction", "must lie in [0, 1)"));
        }
        if self.intervene.batch_sizes.iter().any(|&b| b < 2) {
            return Err(config_err("intervene.batch_sizes", "batch sizes must be at least 2"));
        }
        if self.intervene.batch_sizes.is_empty() || self.intervene.shuffle.is_empty() || self.intervene.seeds.is_empty() {
            return Err(config_err("intervene", "grid must be non-empty"));
        }
        self.train
            .validate()
            .map_err(|e| config_err("train", e.to_string()))?;
        if self.train.depth == 0 {
            return Err(config_err("train.depth", "must be at least 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn context_model(&self) -> ContextModel {
        self.context.unwrap_or_else(|| match &self.data.synthetic {
            Some(s) => s.context(),
            None => ContextModel::none(),
        })
    }

    pub fn load_data(&self) -> Result<Dataset, HarnessError> {
        let ds = match (&self.data.path, &self.data.synthetic) {
            (Some(p), _) => load_dataset(p)?,
            (None, Some(s)) => generate_synthetic(s, self.data.n)?,
            (None, None) => return Err(config_err("data", "set either path or synthetic")),
        };
        match &self.views {
            Some(v) => Ok(ds.with_views(v)?),
            None => Ok(ds),
        }
    }
}

/// Train / validation / test partition of a dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn make_splits(ds: &Dataset, split: &SplitConfig, val_fraction: f64) -> Splits {
    let (rest, test) = split_validation(ds, split.test_fraction, split.seed);
    let (train, val) = split_validation(&rest, val_fraction, derive_seed(split.seed, 1));
    Splits { train, val, test }
}
