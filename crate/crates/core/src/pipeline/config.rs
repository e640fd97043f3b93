use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::SsimConfig;
use crate::model::ModelConfig;
use crate::nn_engine::optim::{DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
use crate::speckle_sim::PatchSpec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Patch counts for one source under per-source allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
}

/// How patches are drawn from the source images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Allocation {
    /// All candidate patches of all sources are pooled, shuffled and split.
    #[default]
    Pooled,
    /// Explicit counts per source file name; unlisted sources contribute nothing.
    PerSource { quotas: BTreeMap<String, SplitCounts> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub patch: PatchSpec,
    pub train_count: usize,
    pub validation_count: usize,
    pub looks: u32,
    pub seed: u64,
    pub allocation: Allocation,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patch: PatchSpec::default(),
            train_count: 30_000,
            validation_count: 12_000,
            looks: 1,
            seed: 0,
            allocation: Allocation::Pooled,
        }
    }
}

impl DatasetConfig {
    /// Requested `(train, validation)` totals.
    pub fn split_counts(&self) -> (usize, usize) {
        match &self.allocation {
            Allocation::Pooled => (self.train_count, self.validation_count),
            Allocation::PerSource { quotas } => quotas
                .values()
                .fold((0, 0), |(t, v), q| (t + q.train, v + q.validation)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.looks == 0 {
            return Err(Error::invalid("number of looks must be at least 1"));
        }
        let (train, validation) = self.split_counts();
        if train == 0 || validation == 0 {
            return Err(Error::invalid(format!(
                "both splits need patches, got {train} train / {validation} validation"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    /// Number of looks the loss assumes; must match the dataset.
    pub looks: u32,
    /// Keep a snapshot every this many epochs; 0 keeps only best and final.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            loss: LossConfig::default(),
            looks: 1,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.looks == 0 {
            return Err(Error::invalid("number of looks must be at least 1"));
        }
        self.loss.validate()
    }
}

/// Rectangular region for ENL measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub psnr_peak: f64,
    pub ssim: SsimConfig,
    /// ENL region of the filtered image; `None` uses the whole image.
    pub enl_region: Option<Region>,
    pub looks: u32,
    /// Histogram settings for the ratio-image KL (lambda is ignored).
    pub histogram: LossConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            psnr_peak: 1.0,
            ssim: SsimConfig::default(),
            enl_region: None,
            looks: 1,
            histogram: LossConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psnr_peak > 0.0) {
            return Err(Error::invalid("PSNR peak must be positive"));
        }
        if self.looks == 0 {
            return Err(Error::invalid("number of looks must be at least 1"));
        }
        self.histogram.validate()
    }
}

/// Everything a run needs, as stored in a JSON config file.
///
/// Missing keys take their defaults; unknown top-level or section keys are
/// rejected. `schema_version` must be present and supported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluation: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ExperimentConfig {
    /// Full-size setup: 30000/12000 patches of 65x65, ten layers of 64
    /// channels, learning rate 2e-6.
    pub fn full() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }

    /// Minutes-scale setup on one core: 2000/400 patches of 33x33, the toy
    /// network, 20 epochs.
    pub fn desk() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetConfig {
                patch: PatchSpec {
                    patch_size: 33,
                    stride: 8,
                    max_patches: None,
                    shuffle_seed: None,
                },
                train_count: 2000,
                validation_count: 400,
                ..DatasetConfig::default()
            },
            model: ModelConfig::toy(),
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            evaluation: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version.to_string(),
                supported: CONFIG_SCHEMA_VERSION,
            });
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.evaluation.validate()?;
        if self.train.looks != self.dataset.looks {
            return Err(Error::ConfigMismatch {
                key: "looks".into(),
                found: self.dataset.looks.to_string(),
                requested: self.train.looks.to_string(),
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("schema_version") {
            Some(v) if v.as_u64() == Some(u64::from(CONFIG_SCHEMA_VERSION)) => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v.to_string(),
                    supported: CONFIG_SCHEMA_VERSION,
                })
            }
            None => return Err(Error::parse("config", "missing `schema_version`")),
        }
        let cfg: Self = serde_json::from_value(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The effective configuration with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the looks of every section at once.
    pub fn set_looks(&mut self, looks: u32) {
        self.dataset.looks = looks;
        self.train.looks = looks;
        self.evaluation.looks = looks;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_profile_files_match_constructors() {
        let desk = ExperimentConfig::from_json(include_str!("../../configs/desk.json")).unwrap();
        let full = ExperimentConfig::from_json(include_str!("../../configs/full.json")).unwrap();
        assert_eq!(desk, ExperimentConfig::desk());
        assert_eq!(full, ExperimentConfig::full());
    }

    #[test]
    fn echo_round_trips_and_lists_defaults() {
        for cfg in [ExperimentConfig::full(), ExperimentConfig::desk()] {
            cfg.validate().unwrap();
            let json = cfg.to_json();
            for key in ["batch_size", "learning_rate", "momentum", "lambda", "bins", "range_max", "patch_size", "train_count", "bn_momentum", "psnr_peak"] {
                assert!(json.contains(&format!("\"{key}\"")), "{key} missing from echo");
            }
            assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
        }
    }

    #[test]
    fn full_profile_defaults() {
        let p = ExperimentConfig::full();
        assert_eq!((p.dataset.train_count, p.dataset.validation_count), (30_000, 12_000));
        assert_eq!(p.dataset.patch.patch_size, 65);
        assert_eq!(p.train.learning_rate, 2e-6);
        assert_eq!(p.train.batch_size, 64);
        assert_eq!((p.model.num_layers, p.model.hidden_channels, p.model.kernel), (10, 64, 3));
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.dataset, DatasetConfig::default());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"train": {}}"#), Err(Error::Parse { .. })));
        assert!(matches!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#), Err(Error::Version { .. })));
        assert!(matches!(ExperimentConfig::from_json(r#"{"schema_version": 1, "trian": {}}"#), Err(Error::Json(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"schema_version": 1, "train": {"learning_rate": -1.0}}"#),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"schema_version": 1, "train": {"looks": 4}}"#),
            Err(Error::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn per_source_counts_sum() {
        let cfg = DatasetConfig {
            allocation: Allocation::PerSource {
                quotas: [
                    ("a.pgm".to_string(), SplitCounts { train: 3, validation: 1 }),
                    ("b.pgm".to_string(), SplitCounts { train: 2, validation: 2 }),
                ]
                .into(),
            },
            ..DatasetConfig::default()
        };
        assert_eq!(cfg.split_counts(), (5, 3));
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"mode\":\"per_source\""));
        assert_eq!(serde_json::from_str::<DatasetConfig>(&json).unwrap(), cfg);
    }
}
