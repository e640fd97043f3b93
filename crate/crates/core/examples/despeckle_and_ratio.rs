//! Despeckles a freshly speckled copy of the bundled scene with a trained
//! checkpoint and inspects the ratio image.
//!
//! cargo run --release --example despeckle_and_ratio <checkpoint.kldnn> [out_dir]
//!
//! Without a checkpoint the hand-built identity network is used, whose
//! ratio image is 1 wherever the noisy pixel exceeds the division floor.

use std::path::PathBuf;

use speckle_lab::loss::LossConfig;
use speckle_lab::metrics::{enl, psnr, ratio_kl};
use speckle_lab::model::{Checkpoint, Model};
use speckle_lab::pipeline::despeckle_image;
use speckle_lab::speckle_sim::{apply_speckle, gamma_speckle_field, load_image, save_image, ImageFormat, SpeckleConfig};

fn main() -> speckle_lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = match args.get(1) {
        Some(path) => Checkpoint::load(path)?.model,
        None => Model::identity(),
    };
    let out = args.get(2).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("speckle-lab-examples"));
    std::fs::create_dir_all(&out).expect("create output directory");

    let looks = 1;
    let clean = load_image(concat!(env!("CARGO_MANIFEST_DIR"), "/data/scene512.pgm"))?;
    let noisy = apply_speckle(&clean, &gamma_speckle_field(SpeckleConfig::new(looks, 2024)?, 512, 512)?)?;
    let hist = LossConfig::default();
    let result = despeckle_image(&model, &noisy, Some(hist.division_floor))?;
    let ratio = result.ratio.expect("ratio requested");

    println!("PSNR noisy    {}", psnr(&clean, &noisy, 1.0)?);
    println!("PSNR filtered {}", psnr(&clean, &result.filtered, 1.0)?);
    println!("ENL of flat region: noisy {:.2}, filtered {:.2}", enl(&noisy.crop(80, 360, 40, 40)?)?, enl(&result.filtered.crop(80, 360, 40, 40)?)?);
    println!("ratio image: mean {:.4}, variance {:.4} (ideal 1 and {:.4})", ratio.mean(), ratio.variance(), 1.0 / f64::from(looks));
    println!("ratio KL {:.5} bits", ratio_kl(&ratio, looks, &hist)?);

    for (name, img) in [("noisy", &noisy), ("filtered", &result.filtered)] {
        save_image(out.join(format!("{name}.pgm")), img, ImageFormat::Pgm8)?;
    }
    // ratio values straddle 1; halve them so the PGM shows most of the range
    let shown = speckle_lab::speckle_sim::GrayImage::new(512, 512, ratio.data().iter().map(|v| v / 2.0).collect())?;
    save_image(out.join("ratio_half.pgm"), &shown, ImageFormat::Pgm8)?;
    save_image(out.join("ratio.gimg"), &ratio, ImageFormat::Native)?;
    println!("images written to {}", out.display());
    Ok(())
}
