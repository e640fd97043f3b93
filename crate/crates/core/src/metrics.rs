//! Despeckling quality measures.
//!
//! Reference-based: PSNR, SSIM and SNR (`10 log10(var(reference) / MSE)`).
//! No-reference: the ratio image `Y / X_hat`, the KL divergence (bits)
//! between its histogram and the Gamma law, and the equivalent number of
//! looks `mean^2 / variance`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::loss::{kl_divergence, reference_gamma_pmf, LossConfig, Pmf};
use crate::model::predict_noise;
use crate::speckle_sim::GrayImage;

/// Metric names a report may contain, in column order.
pub const METRIC_NAMES: [&str; 5] = ["psnr", "ssim", "snr", "enl", "ratio_kl"];

/// A metric value; `Identical` stands for the `+inf` dB of a zero error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Identical,
    Value(f64),
}

impl Score {
    pub fn value(&self) -> Option<f64> {
        match self {
            Score::Identical => None,
            Score::Value(v) => Some(*v),
        }
    }

    pub fn is_identical(&self) -> bool {
        matches!(self, Score::Identical)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Identical => f.write_str("identical"),
            Score::Value(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Score::Identical => s.serialize_str("identical"),
            Score::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Score::Value(v)),
            Raw::Text(t) if t == "identical" => Ok(Score::Identical),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected metric value `{t}`"))),
        }
    }
}

fn mse(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    reference.ensure_same_dims(test)?;
    let n = reference.len() as f64;
    Ok(reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`. Symmetric in its two images.
pub fn psnr(reference: &GrayImage, test: &GrayImage, peak: f64) -> Result<Score> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("PSNR peak must be positive, got {peak}")));
    }
    let err = mse(reference, test)?;
    if err == 0.0 {
        return Ok(Score::Identical);
    }
    Ok(Score::Value(10.0 * (peak * peak / err).log10()))
}

/// `10 log10(var(reference) / MSE)`.
pub fn snr(reference: &GrayImage, test: &GrayImage) -> Result<Score> {
    let err = mse(reference, test)?;
    let var = reference.variance();
    if var == 0.0 {
        return Err(Error::invalid("SNR is undefined for a constant reference"));
    }
    if err == 0.0 {
        return Ok(Score::Identical);
    }
    Ok(Score::Value(10.0 * (var / err).log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(width: usize, height: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let w1 = width + 1;
    let mut t = vec![0.0; w1 * (height + 1)];
    for r in 0..height {
        let mut row = 0.0;
        for c in 0..width {
            row += f(r * width + c);
            t[(r + 1) * w1 + c + 1] = t[r * w1 + c + 1] + row;
        }
    }
    t
}

/// Mean SSIM over every `window x window` position (stride 1, uniform
/// weights, population statistics).
pub fn ssim(reference: &GrayImage, test: &GrayImage, cfg: &SsimConfig) -> Result<f64> {
    reference.ensure_same_dims(test)?;
    let (h, w, win) = (reference.height(), reference.width(), cfg.window);
    if win == 0 || h < win || w < win {
        return Err(Error::invalid(format!(
            "SSIM window {win}x{win} does not fit a {h}x{w} image"
        )));
    }
    let (a, b) = (reference.data(), test.data());
    let sa = integral(w, h, |i| a[i]);
    let sb = integral(w, h, |i| b[i]);
    let saa = integral(w, h, |i| a[i] * a[i]);
    let sbb = integral(w, h, |i| b[i] * b[i]);
    let sab = integral(w, h, |i| a[i] * b[i]);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let n = (win * win) as f64;
    let w1 = w + 1;
    let window_sum = |t: &[f64], r: usize, c: usize| {
        t[(r + win) * w1 + c + win] - t[r * w1 + c + win] - t[(r + win) * w1 + c] + t[r * w1 + c]
    };
    let mut total = 0.0;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let mx = window_sum(&sa, r, c) / n;
            let my = window_sum(&sb, r, c) / n;
            let vx = window_sum(&saa, r, c) / n - mx * mx;
            let vy = window_sum(&sbb, r, c) / n - my * my;
            let cxy = window_sum(&sab, r, c) / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - win + 1) * (w - win + 1)) as f64)
}

/// `Y / max(X_hat, floor)`; contains only speckle for an ideal filter.
pub fn ratio_image(noisy: &GrayImage, filtered: &GrayImage, floor: f64) -> Result<GrayImage> {
    predict_noise(noisy, filtered, floor)
}

/// KL divergence (bits) between the hard-binned ratio-image histogram and
/// the binned Gamma law; lower is better.
pub fn ratio_kl(ratio: &GrayImage, looks: u32, cfg: &LossConfig) -> Result<f64> {
    let bins = cfg.bins_for(looks)?;
    let empirical = Pmf::hard_histogram(ratio.data(), &bins)?;
    let reference = reference_gamma_pmf(looks, &bins)?;
    kl_divergence(&empirical, &reference, cfg.epsilon_floor)
}

/// Equivalent number of looks `mean^2 / variance` of a homogeneous region.
pub fn enl(region: &GrayImage) -> Result<f64> {
    if region.len() < 16 {
        return Err(Error::invalid(format!(
            "ENL needs at least 16 pixels, got {}",
            region.len()
        )));
    }
    let var = region.variance();
    if var == 0.0 {
        return Err(Error::invalid("ENL is undefined for a constant region"));
    }
    let mean = region.mean();
    Ok(mean * mean / var)
}

/// Where a report came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub image_ids: Vec<String>,
    pub checkpoint_id: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub values: BTreeMap<String, Score>,
}

/// Per-image metrics with a final aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub aggregate: BTreeMap<String, Score>,
    pub provenance: Provenance,
}

impl MetricsReport {
    /// Builds a report from per-image rows. Every row must carry exactly the
    /// listed metrics and every value must be finite.
    ///
    /// The aggregate of a metric is the arithmetic mean of the rows, and is
    /// `Identical` when any row is (the mean of a `+inf` column).
    pub fn new(metrics: &[&str], rows: Vec<ReportRow>, mut provenance: Provenance) -> Result<Self> {
        for m in metrics {
            if !METRIC_NAMES.contains(m) {
                return Err(Error::invalid(format!("unknown metric `{m}`")));
            }
        }
        for row in &rows {
            if row.values.len() != metrics.len() || metrics.iter().any(|m| !row.values.contains_key(*m)) {
                return Err(Error::invalid(format!("row `{}` does not match the metric list", row.id)));
            }
            if let Some((k, v)) = row.values.iter().find(|(_, v)| v.value().is_some_and(|x| !x.is_finite())) {
                return Err(Error::invalid(format!("row `{}` has non-finite {k} = {v}", row.id)));
            }
        }
        let mut aggregate = BTreeMap::new();
        if !rows.is_empty() {
            for m in metrics {
                let column: Vec<Score> = rows.iter().map(|r| r.values[*m]).collect();
                let agg = if column.iter().any(Score::is_identical) {
                    Score::Identical
                } else {
                    Score::Value(column.iter().filter_map(Score::value).sum::<f64>() / column.len() as f64)
                };
                aggregate.insert(m.to_string(), agg);
            }
        }
        provenance.image_ids = rows.iter().map(|r| r.id.clone()).collect();
        Ok(Self {
            metrics: metrics.iter().map(|m| m.to_string()).collect(),
            rows,
            aggregate,
            provenance,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid(format!("CSV encoding failed: {e}"));
        let mut header = vec!["image".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.id.clone()];
            rec.extend(self.metrics.iter().map(|m| row.values[m].to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut rec = vec!["aggregate".to_string()];
        rec.extend(
            self.metrics
                .iter()
                .map(|m| self.aggregate.get(m).map(Score::to_string).unwrap_or_default()),
        );
        w.write_record(&rec).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("CSV encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))
    }
}
