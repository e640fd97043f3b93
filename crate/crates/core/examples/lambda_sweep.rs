//! Trains the desk profile for several KL weights on one dataset and
//! tabulates validation PSNR and ratio-image KL at each best checkpoint.
//!
//! cargo run --release --example lambda_sweep [epochs] [lambda,lambda,...]

use speckle_lab::pipeline::{build_dataset, train, ExperimentConfig};

fn main() -> speckle_lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::desk();
    if let Some(epochs) = args.get(1) {
        cfg.train.epochs = epochs.parse().expect("epochs must be an integer");
    }
    let lambdas: Vec<f64> = args
        .get(2)
        .map(|s| s.split(',').map(|v| v.parse().expect("lambda must be a number")).collect())
        .unwrap_or_else(|| vec![0.0, 0.1, 1.0]);

    let dir = std::env::temp_dir().join("speckle-lab-sweep");
    build_dataset(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data")), &cfg.dataset, &dir)?;
    println!("{:>8} {:>6} {:>12} {:>12} {:>12}", "lambda", "best", "val loss", "PSNR dB", "ratio KL");
    for lambda in lambdas {
        cfg.train.loss.lambda = lambda;
        let outcome = train(&dir, &cfg.model, &cfg.train)?;
        let b = outcome.report.best();
        println!(
            "{lambda:>8} {:>6} {:>12.6} {:>12.3} {:>12.5}",
            b.epoch, b.validation_total, b.validation_psnr, b.validation_ratio_kl
        );
    }
    Ok(())
}
