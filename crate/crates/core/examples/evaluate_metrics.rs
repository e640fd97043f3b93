//! Reference and no-reference metrics for the noisy scene and for a simple
//! box filter, collected into a CSV report.
//!
//! cargo run --example evaluate_metrics

use std::collections::BTreeMap;

use speckle_lab::loss::LossConfig;
use speckle_lab::metrics::{enl, psnr, ratio_image, ratio_kl, snr, ssim, MetricsReport, Provenance, ReportRow, Score, SsimConfig};
use speckle_lab::speckle_sim::{apply_speckle, gamma_speckle_field, load_image, GrayImage, SpeckleConfig};

fn box_filter(img: &GrayImage, radius: usize) -> GrayImage {
    let (h, w) = img.dims();
    GrayImage::from_fn(h, w, |r, c| {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius + 1).min(h));
        let (c0, c1) = (c.saturating_sub(radius), (c + radius + 1).min(w));
        let mut sum = 0.0;
        for rr in r0..r1 {
            for cc in c0..c1 {
                sum += img.get(rr, cc);
            }
        }
        sum / ((r1 - r0) * (c1 - c0)) as f64
    })
    .expect("finite average")
}

fn main() -> speckle_lab::Result<()> {
    let clean = load_image(concat!(env!("CARGO_MANIFEST_DIR"), "/data/scene512.pgm"))?;
    let noisy = apply_speckle(&clean, &gamma_speckle_field(SpeckleConfig::new(4, 1)?, 512, 512)?)?;
    let hist = LossConfig::default();

    let mut rows = Vec::new();
    for (id, filtered) in [("noisy", noisy.clone()), ("box3", box_filter(&noisy, 1)), ("box7", box_filter(&noisy, 3))] {
        let ratio = ratio_image(&noisy, &filtered, hist.division_floor)?;
        let values: BTreeMap<String, Score> = [
            ("psnr", psnr(&clean, &filtered, 1.0)?),
            ("ssim", Score::Value(ssim(&clean, &filtered, &SsimConfig::default())?)),
            ("snr", snr(&clean, &filtered)?),
            ("enl", Score::Value(enl(&filtered.crop(80, 360, 40, 40)?)?)),
            ("ratio_kl", Score::Value(ratio_kl(&ratio, 4, &hist)?)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        rows.push(ReportRow { id: id.into(), values });
    }
    let report = MetricsReport::new(&["psnr", "ssim", "snr", "enl", "ratio_kl"], rows, Provenance::default())?;
    print!("{}", report.to_csv()?);
    Ok(())
}
