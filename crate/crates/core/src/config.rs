//! Versioned JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{induce_class_imbalance, load_csv, load_mnist_idx, make_gaussian_blobs, split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{Arch, ModelState};
use crate::selectors::Strategy;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs { n_per_class: usize, class_count: usize, dim: usize, class_sep: f64, seed: u64 },
    Csv { path: PathBuf, class_count: Option<usize> },
    Mnist { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub affected_fraction: f64,
    pub removal_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// Applied to the training split only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<ImbalanceSpec>,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub model: Arch,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub budget: Option<f64>,
    pub per_batch: bool,
    pub warm_kappa: Option<f64>,
    pub is_valid: bool,
    pub output_dir: Option<PathBuf>,
}

/// Train, validation and test sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", cfg.schema_version)));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = o.strategy {
            self.train.strategy = s;
        }
        if let Some(b) = o.budget {
            self.train.budget_fraction = b;
        }
        if o.per_batch {
            self.train.per_batch = true;
        }
        if let Some(k) = o.warm_kappa {
            self.train.warm_kappa = k;
        }
        if o.is_valid {
            self.train.is_valid = true;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.train.validate().map_err(cfg_err)?;
        self.dataset.split.validate().map_err(cfg_err)?;
        let missing = |p: &Path| (!p.exists()).then(|| Error::Config(format!("{} does not exist", p.display())));
        match &self.dataset.source {
            DatasetSource::Blobs { n_per_class, class_count, dim, class_sep, .. } => {
                if *n_per_class == 0 || *class_count == 0 || *dim == 0 || !(*class_sep > 0.0) {
                    return Err(Error::Config("blob parameters must be positive".into()));
                }
            }
            DatasetSource::Csv { path, .. } => {
                if let Some(e) = missing(path) {
                    return Err(e);
                }
            }
            DatasetSource::Mnist { images, labels } => {
                if let Some(e) = missing(images).or_else(|| missing(labels)) {
                    return Err(e);
                }
            }
        }
        if let Some(im) = &self.dataset.imbalance {
            if !(0.0..=1.0).contains(&im.affected_fraction) || !(0.0..=1.0).contains(&im.removal_fraction) {
                return Err(Error::Config("imbalance fractions must lie in [0, 1]".into()));
            }
        }
        if let Arch::Mlp { hidden_width: 0 } = self.model {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Splits> {
        let full = match &self.dataset.source {
            DatasetSource::Blobs { n_per_class, class_count, dim, class_sep, seed } => {
                make_gaussian_blobs(*n_per_class, *class_count, *dim, *class_sep, *seed)?
            }
            DatasetSource::Csv { path, class_count } => load_csv(path, *class_count)?,
            DatasetSource::Mnist { images, labels } => load_mnist_idx(images, labels)?,
        };
        let (mut train, validation, test) = split(&full, &self.dataset.split)?;
        if let Some(im) = &self.dataset.imbalance {
            train = induce_class_imbalance(&train, im.affected_fraction, im.removal_fraction, im.seed)?;
        }
        Ok(Splits { train, validation, test })
    }

    pub fn init_model(&self, data: &Dataset, seed: u64) -> Result<ModelState> {
        ModelState::init(self.model, data.n_features(), data.class_count(), seed)
    }

    /// A small blobs experiment with the default training protocol.
    pub fn example() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSpec {
                source: DatasetSource::Blobs { n_per_class: 500, class_count: 2, dim: 5, class_sep: 3.0, seed: 0 },
                imbalance: None,
                split: SplitSpec { train_fraction: 0.8, validation_fraction: 0.1, seed: 0 },
            },
            model: Arch::LogisticRegression,
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/example"),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::example();
        cfg.dataset.imbalance = Some(ImbalanceSpec { affected_fraction: 0.3, removal_fraction: 0.9, seed: 4 });
        cfg.model = Arch::Mlp { hidden_width: 16 };
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn wrong_schema_version_is_a_config_error() {
        let text = ExperimentConfig::example().to_json().replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_paths_fail_validation() {
        let mut cfg = ExperimentConfig::example();
        cfg.dataset.source = DatasetSource::Csv { path: "/nonexistent/x.csv".into(), class_count: None };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::example();
        cfg.apply(&Overrides { seed: Some(9), strategy: Some(Strategy::Craig), budget: Some(0.3), ..Overrides::default() });
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.train.strategy, Strategy::Craig);
        assert_eq!(cfg.train.budget_fraction, 0.3);
    }

    #[test]
    fn partial_train_section_uses_defaults() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::example().to_json()).unwrap();
        v["train"] = serde_json::json!({ "total_epochs": 7 });
        let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.train.total_epochs, 7);
        assert_eq!(cfg.train.selection_interval, 20);
        assert_eq!(cfg.train.lambda, 0.5);
    }
}
