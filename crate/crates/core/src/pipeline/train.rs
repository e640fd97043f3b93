use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::{Dataset, PatchStore};
use crate::error::{Error, Result};
use crate::loss::{HybridLoss, LossOutput};
use crate::metrics::ratio_kl;
use crate::model::{Checkpoint, Model, ModelConfig, TrainingMeta};
use crate::nn_engine::{sgd_momentum_step, Mode, OptimState, Shape, Tensor};
use crate::rng::{derive_seed, rng_from_seed};
use crate::speckle_sim::GrayImage;

const SHUFFLE_STREAM: u64 = 0x5F1E;

pub const REPORT_FILE: &str = "train_report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const BEST_CHECKPOINT: &str = "best.kldnn";
pub const FINAL_CHECKPOINT: &str = "final.kldnn";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_total: f64,
    pub train_mse: f64,
    pub train_kl: f64,
    pub validation_total: f64,
    pub validation_mse: f64,
    pub validation_kl: f64,
    /// PSNR (peak 1) of the clamped output over all validation pixels.
    pub validation_psnr: f64,
    /// Mean over validation patches of the ratio-image KL (bits).
    pub validation_ratio_kl: f64,
}

/// Validation quality of the untouched noisy input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub validation_psnr: f64,
}

/// Per-epoch history of a run. Contains nothing time-dependent, so equal
/// seeds give byte-equal reports; wall-clock time lives in [`TrainOutcome`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_patches: usize,
    pub validation_patches: usize,
    pub baseline: Baseline,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn last(&self) -> &EpochStats {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn best(&self) -> &EpochStats {
        &self.epochs[self.best_epoch - 1]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Snapshots taken every `checkpoint_every` epochs.
    pub snapshots: Vec<Checkpoint>,
    pub wall_clock: Duration,
}

impl TrainOutcome {
    /// Writes the report, the timing sidecar and all checkpoints into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join(REPORT_FILE);
        std::fs::write(&report, self.report.to_json()?).map_err(|e| Error::io(&report, e))?;
        let timing = dir.join(TIMING_FILE);
        let json = serde_json::json!({ "wall_clock_seconds": self.wall_clock.as_secs_f64() });
        std::fs::write(&timing, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&timing, e))?;
        self.best.save(dir.join(BEST_CHECKPOINT))?;
        self.last.save(dir.join(FINAL_CHECKPOINT))?;
        for snap in &self.snapshots {
            snap.save(dir.join(format!("epoch_{:04}.kldnn", snap.meta.epoch)))?;
        }
        Ok(())
    }
}

/// Stacks the listed patches into `(clean, noisy)` batch tensors.
fn gather(store: &PatchStore, indices: &[usize]) -> (Tensor, Tensor) {
    let p = store.patch_size();
    let shape = Shape::new(indices.len(), 1, p, p);
    let mut clean = Vec::with_capacity(shape.len());
    let mut noisy = Vec::with_capacity(shape.len());
    for &i in indices {
        clean.extend_from_slice(store.clean(i));
        noisy.extend_from_slice(store.noisy(i));
    }
    (
        Tensor::from_vec(shape, clean).expect("sized batch"),
        Tensor::from_vec(shape, noisy).expect("sized batch"),
    )
}

fn check_finite(out: &LossOutput, epoch: usize, batch: usize) -> Result<()> {
    let component = if !out.mse.is_finite() {
        "MSE"
    } else if !out.kl.is_finite() || !out.total.is_finite() {
        "KL"
    } else if !out.grad.all_finite() {
        "gradient"
    } else {
        return Ok(());
    };
    Err(Error::NonFinite {
        epoch,
        batch,
        component,
    })
}

#[derive(Default)]
struct Accumulator {
    total: f64,
    mse: f64,
    kl: f64,
    weight: usize,
}

impl Accumulator {
    fn add(&mut self, out: &LossOutput, n: usize) {
        let w = n as f64;
        self.total += out.total * w;
        self.mse += out.mse * w;
        self.kl += out.kl * w;
        self.weight += n;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let w = self.weight as f64;
        (self.total / w, self.mse / w, self.kl / w)
    }
}

struct Validation {
    total: f64,
    mse: f64,
    kl: f64,
    psnr: f64,
    ratio_kl: f64,
}

fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

fn validate(model: &Model, store: &PatchStore, loss: &HybridLoss, batch_size: usize) -> Result<Validation> {
    let p = store.patch_size();
    let mut acc = Accumulator::default();
    let mut sq_err = 0.0;
    let mut ratio_kl_sum = 0.0;
    let all: Vec<usize> = (0..store.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (clean, noisy) = gather(store, chunk);
        let pred = model.predict(&noisy)?;
        acc.add(&loss.evaluate(&noisy, &pred, &clean)?, chunk.len());
        let floor = loss.cfg.division_floor;
        for (k, &i) in chunk.iter().enumerate() {
            let out = &pred.data()[k * p * p..(k + 1) * p * p];
            let mut ratio = Vec::with_capacity(p * p);
            for ((x_hat, x), y) in out.iter().zip(store.clean(i)).zip(store.noisy(i)) {
                let x_hat = x_hat.max(0.0);
                sq_err += (x_hat - x) * (x_hat - x);
                ratio.push(y / x_hat.max(floor));
            }
            ratio_kl_sum += ratio_kl(&GrayImage::new(p, p, ratio)?, loss.looks, &loss.cfg)?;
        }
    }
    let (total, mse, kl) = acc.mean();
    Ok(Validation {
        total,
        mse,
        kl,
        psnr: psnr_from_mse(sq_err / (store.len() * p * p) as f64),
        ratio_kl: ratio_kl_sum / store.len() as f64,
    })
}

fn input_psnr(store: &PatchStore) -> f64 {
    let mut sq_err = 0.0;
    for i in 0..store.len() {
        sq_err += store.noisy(i).iter().zip(store.clean(i)).map(|(y, x)| (y - x) * (y - x)).sum::<f64>();
    }
    psnr_from_mse(sq_err / (store.len() * store.patch_size().pow(2)) as f64)
}

/// Loads and verifies a dataset, then trains on it.
pub fn train(manifest: &Path, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = Dataset::load(manifest)?;
    if data.manifest.looks() != cfg.looks {
        return Err(Error::ConfigMismatch {
            key: "looks".into(),
            found: data.manifest.looks().to_string(),
            requested: cfg.looks.to_string(),
        });
    }
    train_on(&data.train, &data.validation, model_cfg, cfg)
}

/// Mini-batch SGD with momentum on in-memory patch stores.
///
/// Each epoch visits the training patches in a seeded random order; the
/// indices inside a batch are sorted so batch contents, not their order,
/// depend on the shuffle. After every epoch the model is scored on the
/// validation split in inference mode. The best checkpoint has the lowest
/// validation loss, ties going to the higher PSNR and then to the earlier
/// epoch.
pub fn train_on(
    train_set: &PatchStore,
    validation_set: &PatchStore,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let start = Instant::now();
    let loss = HybridLoss::new(cfg.loss, cfg.looks)?;
    let mut model = Model::new(*model_cfg, cfg.seed)?;
    let mut opt = OptimState::new(cfg.learning_rate, cfg.momentum)?;
    let meta = |epoch| TrainingMeta {
        epoch,
        seed: cfg.seed,
        lambda: cfg.loss.lambda,
        learning_rate: cfg.learning_rate,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, Model)> = None;
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.epochs {
        model.mode = Mode::Train;
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64)));
        let mut acc = Accumulator::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut indices = chunk.to_vec();
            indices.sort_unstable();
            let (clean, noisy) = gather(train_set, &indices);
            let (pred, tape) = model.forward_train(&noisy)?;
            let out = loss.evaluate(&noisy, &pred, &clean)?;
            check_finite(&out, epoch, b + 1)?;
            let grads = model.backward(&tape, &out.grad)?;
            let bufs = grads.buffers();
            if !bufs.iter().all(|g| g.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b + 1,
                    component: "gradient",
                });
            }
            sgd_momentum_step(&mut model.network_mut().parameters_mut(), &bufs, &mut opt)?;
            acc.add(&out, indices.len());
        }
        model.mode = Mode::Infer;
        let v = validate(&model, validation_set, &loss, cfg.batch_size)?;
        let (train_total, train_mse, train_kl) = acc.mean();
        epochs.push(EpochStats {
            epoch,
            train_total,
            train_mse,
            train_kl,
            validation_total: v.total,
            validation_mse: v.mse,
            validation_kl: v.kl,
            validation_psnr: v.psnr,
            validation_ratio_kl: v.ratio_kl,
        });
        let improved = match &best {
            None => true,
            Some((_, loss, psnr, _)) => v.total < *loss || (v.total == *loss && v.psnr > *psnr),
        };
        if improved {
            best = Some((epoch, v.total, v.psnr, model.clone()));
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push(Checkpoint::new(model.clone(), meta(epoch)));
        }
    }
    let (best_epoch, _, _, best_model) = best.expect("at least one epoch");
    let report = TrainReport {
        model: *model_cfg,
        train: cfg.clone(),
        train_patches: train_set.len(),
        validation_patches: validation_set.len(),
        baseline: Baseline {
            validation_psnr: input_psnr(validation_set),
        },
        epochs,
        best_epoch,
    };
    Ok(TrainOutcome {
        report,
        best: Checkpoint::new(best_model, meta(best_epoch)),
        last: Checkpoint::new(model, meta(cfg.epochs)),
        snapshots,
        wall_clock: start.elapsed(),
    })
}
