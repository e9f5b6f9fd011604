use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::scene::{load_dataset, Dataset, GeneratorConfig};
use crate::train::{EvalConfig, TrainConfig};

/// Training and validation data: either generated in memory from the
/// generator config, or loaded from directories written by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub val_root: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub train_count: usize,
    /// Seed of the first training sample; sample `i` uses `train_seed + i`.
    pub train_seed: u64,
    pub val_count: usize,
    pub val_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: None,
            val_root: None,
            generator: GeneratorConfig::default(),
            train_count: 200,
            train_seed: 0,
            val_count: 50,
            val_seed: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        self.generator.class_count
    }

    pub fn load(&self, exec: Execution) -> Result<Datasets> {
        let load = |root: &Option<PathBuf>, seed: u64, count: usize| -> Result<Dataset> {
            match root {
                Some(r) => {
                    let (d, m) = load_dataset(r)?;
                    if m.class_count != self.generator.class_count {
                        return Err(Error::Config(format!(
                            "{} holds {} classes but the generator config says {}",
                            r.display(),
                            m.class_count,
                            self.generator.class_count
                        )));
                    }
                    Ok(d)
                }
                None => Dataset::generate(&self.generator, seed, count, exec),
            }
        };
        let train = load(&self.root, self.train_seed, self.train_count)?;
        let val = load(&self.val_root, self.val_seed, self.val_count)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation sets must be non-empty".into()));
        }
        Ok(Datasets { train, val })
    }
}

/// Seeds and grids shared by the comparison experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3],
            lambdas: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub execution: Execution,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            execution: Execution::Parallel,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.generator.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must be non-empty".into()));
        }
        if self.experiment.lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("experiment.lambdas must be finite and >= 0".into()));
        }
        if self.dataset.train_count == 0 && self.dataset.root.is_none() {
            return Err(Error::Config("dataset.train_count must be positive".into()));
        }
        Ok(())
    }

    /// Fully-resolved config, defaults included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
