use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use crate::error::{Error, Result};
use crate::metrics::{enl, psnr, ratio_image, ratio_kl, snr, ssim, MetricsReport, Provenance, ReportRow, Score};
use crate::model::Model;
use crate::speckle_sim::{decode_image, GrayImage};

/// Filtered image and, when requested, the ratio image `Y / max(X_hat, floor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Despeckled {
    pub filtered: GrayImage,
    pub ratio: Option<GrayImage>,
}

/// Infer-mode despeckling; the output is clamped to `[0, inf)`.
pub fn despeckle_image(model: &Model, noisy: &GrayImage, ratio_floor: Option<f64>) -> Result<Despeckled> {
    let filtered = model.despeckle(noisy)?;
    let ratio = ratio_floor.map(|floor| ratio_image(noisy, &filtered, floor)).transpose()?;
    Ok(Despeckled { filtered, ratio })
}

/// How a corpus directory is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `noisy/` and `clean/` subdirectories with matching file stems.
    Paired,
    /// Noisy images directly in the directory, no reference.
    Unpaired,
}

impl Pairing {
    pub fn metrics(&self) -> &'static [&'static str] {
        match self {
            Pairing::Paired => &["psnr", "ssim", "snr"],
            Pairing::Unpaired => &["enl", "ratio_kl"],
        }
    }
}

fn list_files(dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut files = Vec::new();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        } else if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    dirs.sort();
    Ok((files, dirs))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// `(id, noisy, clean)` triples of a corpus in the declared layout.
fn collect(dir: &Path, pairing: Pairing) -> Result<Vec<(String, PathBuf, Option<PathBuf>)>> {
    let (files, dirs) = list_files(dir)?;
    let has = |name: &str| dirs.iter().any(|d| d.file_name().is_some_and(|n| n == name));
    let ambiguous = |why: &str| Err(Error::invalid(format!("ambiguous corpus {}: {why}", dir.display())));
    let entries = match pairing {
        Pairing::Unpaired => {
            if has("noisy") || has("clean") {
                return ambiguous("declared unpaired but has noisy/ or clean/ subdirectories");
            }
            files.into_iter().map(|f| (stem(&f), f, None)).collect::<Vec<_>>()
        }
        Pairing::Paired => {
            if !has("noisy") || !has("clean") {
                return ambiguous("declared paired but lacks noisy/ and clean/ subdirectories");
            }
            if !files.is_empty() {
                return ambiguous("paired layout with loose files next to noisy/ and clean/");
            }
            let (noisy, _) = list_files(&dir.join("noisy"))?;
            let (clean, _) = list_files(&dir.join("clean"))?;
            let mut by_stem: BTreeMap<String, PathBuf> = BTreeMap::new();
            for c in clean {
                if by_stem.insert(stem(&c), c.clone()).is_some() {
                    return ambiguous(&format!("two clean images share the stem `{}`", stem(&c)));
                }
            }
            let mut out = Vec::new();
            for n in noisy {
                let id = stem(&n);
                let Some(c) = by_stem.remove(&id) else {
                    return ambiguous(&format!("noisy `{id}` has no clean counterpart"));
                };
                if out.iter().any(|(other, _, _)| *other == id) {
                    return ambiguous(&format!("two noisy images share the stem `{id}`"));
                }
                out.push((id, n, Some(c)));
            }
            if let Some(id) = by_stem.keys().next() {
                return ambiguous(&format!("clean `{id}` has no noisy counterpart"));
            }
            out
        }
    };
    if entries.is_empty() {
        return Err(Error::invalid(format!("corpus {} holds no images", dir.display())));
    }
    Ok(entries)
}

/// Despeckles every noisy image of a corpus and scores the results.
///
/// Paired corpora report PSNR, SSIM and SNR against the clean images;
/// unpaired corpora report the ENL of the filtered image (over
/// `cfg.enl_region` or the whole image) and the ratio-image KL.
pub fn evaluate_corpus(
    model: &Model,
    dir: &Path,
    pairing: Pairing,
    cfg: &EvalConfig,
    provenance: Provenance,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (id, noisy_path, clean_path) in collect(dir, pairing)? {
        let noisy = load(&noisy_path)?;
        let floor = cfg.histogram.division_floor;
        let out = despeckle_image(model, &noisy, Some(floor))?;
        let mut values = BTreeMap::new();
        match clean_path {
            Some(clean_path) => {
                let clean = load(&clean_path)?;
                values.insert("psnr".to_string(), psnr(&clean, &out.filtered, cfg.psnr_peak)?);
                values.insert("ssim".to_string(), Score::Value(ssim(&clean, &out.filtered, &cfg.ssim)?));
                values.insert("snr".to_string(), snr(&clean, &out.filtered)?);
            }
            None => {
                let region = match cfg.enl_region {
                    Some(r) => out.filtered.crop(r.row, r.col, r.height, r.width)?,
                    None => out.filtered.clone(),
                };
                values.insert("enl".to_string(), Score::Value(enl(&region)?));
                let ratio = out.ratio.expect("ratio requested");
                values.insert("ratio_kl".to_string(), Score::Value(ratio_kl(&ratio, cfg.looks, &cfg.histogram)?));
            }
        }
        rows.push(ReportRow { id, values });
    }
    MetricsReport::new(pairing.metrics(), rows, provenance)
}
