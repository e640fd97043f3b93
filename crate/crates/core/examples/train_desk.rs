//! Builds the desk-scale dataset from the bundled scene and trains the toy
//! network on it, printing the per-epoch history.
//!
//! cargo run --release --example train_desk [epochs] [lambda] [out_dir]

use std::path::{Path, PathBuf};

use speckle_lab::pipeline::{build_dataset, train, ExperimentConfig};

fn main() -> speckle_lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::desk();
    if let Some(epochs) = args.get(1) {
        cfg.train.epochs = epochs.parse().expect("epochs must be an integer");
    }
    if let Some(lambda) = args.get(2) {
        cfg.train.loss.lambda = lambda.parse().expect("lambda must be a number");
    }
    let out = args.get(3).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("speckle-lab-desk"));
    let corpus = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data"));

    let manifest = build_dataset(corpus, &cfg.dataset, &out.join("dataset"))?;
    println!(
        "dataset: {} train / {} validation patches of {}px, L = {}",
        manifest.train.count,
        manifest.validation.count,
        manifest.patch.patch_size,
        manifest.looks()
    );

    let outcome = train(&out.join("dataset"), &cfg.model, &cfg.train)?;
    let report = &outcome.report;
    println!("noisy input PSNR {:.3} dB", report.baseline.validation_psnr);
    for e in &report.epochs {
        println!(
            "epoch {:>2}: train {:.5} (mse {:.5}, kl {:.4}) | val {:.5}, PSNR {:.3} dB, ratio KL {:.4}",
            e.epoch, e.train_total, e.train_mse, e.train_kl, e.validation_total, e.validation_psnr, e.validation_ratio_kl
        );
    }
    let best = report.best();
    println!(
        "best epoch {}: PSNR gain {:.2} dB in {:.0}s",
        best.epoch,
        best.validation_psnr - report.baseline.validation_psnr,
        outcome.wall_clock.as_secs_f64()
    );
    outcome.write(&out.join("run"))?;
    println!("checkpoints and report in {}", out.join("run").display());
    Ok(())
}
