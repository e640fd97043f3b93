//! Soft histograms of Gamma samples against the binned reference law, and
//! the KL divergence (bits) for matching and mismatched look counts.
//!
//! cargo run --example kl_histogram

use speckle_lab::loss::{kl_divergence, reference_gamma_pmf, soft_histogram, LossConfig};
use speckle_lab::speckle_sim::{gamma_speckle_field, SpeckleConfig};

fn main() -> speckle_lab::Result<()> {
    let cfg = LossConfig::default();
    for model_looks in [1, 4] {
        let bins = cfg.bins_for(model_looks)?;
        let reference = reference_gamma_pmf(model_looks, &bins)?;
        println!("reference law L = {model_looks}: {} bins on [0, {:.1}]", bins.count, bins.max);
        for sample_looks in [1, 2, 4, 16] {
            let draws = gamma_speckle_field(SpeckleConfig::new(sample_looks, 3)?, 1, 100_000)?;
            let hist = soft_histogram(draws.data(), &bins, cfg.soft_bandwidth)?;
            let kl = kl_divergence(&hist.pmf, &reference, cfg.epsilon_floor)?;
            println!("  samples with L = {sample_looks:>2}: KL = {kl:.5} bits");
        }
    }
    Ok(())
}
