//! End-to-end orchestration: configuration, dataset construction, the
//! training loop, inference and corpus evaluation.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod train;

pub use config::{Allocation, DatasetConfig, EvalConfig, ExperimentConfig, Region, SplitCounts, TrainConfig, CONFIG_SCHEMA_VERSION};
pub use dataset::{build_dataset, Dataset, DatasetManifest, PatchIndex, PatchStore, MANIFEST_FILE};
pub use train::{train, train_on, Baseline, EpochStats, TrainOutcome, TrainReport};
pub use evaluate::{despeckle_image, evaluate_corpus, Despeckled, Pairing};
