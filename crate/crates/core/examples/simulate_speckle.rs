//! Speckles the bundled scene at several look counts and reports the
//! statistics of the noise field and of a homogeneous region.
//!
//! cargo run --example simulate_speckle [out_dir]

use std::path::PathBuf;

use speckle_lab::metrics::enl;
use speckle_lab::speckle_sim::{apply_speckle, gamma_speckle_field, load_image, save_image, ImageFormat, SpeckleConfig};

fn main() -> speckle_lab::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("speckle-lab-examples"));
    std::fs::create_dir_all(&out).expect("create output directory");
    let clean = load_image(concat!(env!("CARGO_MANIFEST_DIR"), "/data/scene512.pgm"))?;
    println!("scene {}x{}, mean {:.4}", clean.height(), clean.width(), clean.mean());

    for looks in [1, 4, 16] {
        let noise = gamma_speckle_field(SpeckleConfig::new(looks, 7)?, clean.height(), clean.width())?;
        let noisy = apply_speckle(&clean, &noise)?;
        // the bright disc around (100, 380) is flat in the clean scene
        let region = noisy.crop(80, 360, 40, 40)?;
        println!(
            "L = {looks:>2}: noise mean {:.4}, variance {:.4} (expected {:.4}), ENL of flat region {:.2}",
            noise.mean(),
            noise.variance(),
            1.0 / f64::from(looks),
            enl(&region)?
        );
        let path = out.join(format!("scene_L{looks}.pgm"));
        save_image(&path, &noisy, ImageFormat::Pgm8)?;
        println!("        wrote {}", path.display());
    }
    Ok(())
}
