//! Fully developed multiplicative speckle: `Y = X * N` with `N` drawn from
//! the unit-mean Gamma law of shape `L` and rate `L`.

mod image;
pub mod io;
mod patches;

pub use self::image::GrayImage;
pub use self::io::{decode_image, encode_image, load_image, save_image, ImageFormat};
pub use self::patches::{extract_patches, patch_positions, PatchSpec};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeckleConfig {
    /// Number of looks `L`.
    pub looks: u32,
    pub seed: u64,
}

impl SpeckleConfig {
    pub fn new(looks: u32, seed: u64) -> Result<Self> {
        let cfg = Self { looks, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.looks == 0 {
            return Err(Error::invalid("number of looks must be at least 1"));
        }
        Ok(())
    }
}

/// Sampler for unit-mean Gamma speckle with shape and rate both equal to
/// the number of looks.
///
/// Uses the Marsaglia-Tsang squeeze method, which is exact for shape >= 1,
/// and rescales the unit-rate draw by `1/L`.
#[derive(Debug, Clone, Copy)]
pub struct GammaSpeckle {
    looks: f64,
    d: f64,
    c: f64,
}

impl GammaSpeckle {
    pub fn new(looks: u32) -> Result<Self> {
        if looks == 0 {
            return Err(Error::invalid("number of looks must be at least 1"));
        }
        let shape = f64::from(looks);
        let d = shape - 1.0 / 3.0;
        Ok(Self {
            looks: shape,
            d,
            c: 1.0 / (9.0 * d).sqrt(),
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        loop {
            let x: f64 = rng.sample(StandardNormal);
            let t = 1.0 + self.c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u: f64 = rng.random();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2
                || u.ln() < 0.5 * x2 + self.d * (1.0 - v + v.ln())
            {
                return self.d * v / self.looks;
            }
        }
    }

    pub fn fill(&self, rng: &mut Rng, out: &mut [f64]) {
        for v in out {
            *v = self.sample(rng);
        }
    }
}

/// Draws an i.i.d. speckle field; identical `(seed, looks, dims)` give
/// bit-identical fields.
pub fn gamma_speckle_field(cfg: SpeckleConfig, height: usize, width: usize) -> Result<GrayImage> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "speckle field dimensions must be positive, got {height}x{width}"
        )));
    }
    let sampler = GammaSpeckle::new(cfg.looks)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut data = vec![0.0; height * width];
    sampler.fill(&mut rng, &mut data);
    GrayImage::new(height, width, data)
}

/// Elementwise `clean * noise`.
pub fn apply_speckle(clean: &GrayImage, noise: &GrayImage) -> Result<GrayImage> {
    clean.ensure_same_dims(noise)?;
    let data = clean
        .data()
        .iter()
        .zip(noise.data())
        .map(|(x, n)| x * n)
        .collect();
    GrayImage::new(clean.height(), clean.width(), data)
}

/// `ln Γ(L)` for a positive integer `L`, i.e. `ln (L-1)!`.
fn ln_gamma_int(looks: u32) -> f64 {
    (2..looks).map(|k| f64::from(k).ln()).sum()
}

/// Unit-mean Gamma density `L^L n^(L-1) e^(-L n) / Γ(L)`.
pub fn gamma_pdf(n: f64, looks: u32) -> Result<f64> {
    if looks == 0 {
        return Err(Error::invalid("number of looks must be at least 1"));
    }
    if n.is_nan() || n < 0.0 {
        return Err(Error::invalid(format!(
            "gamma density is defined for n >= 0, got {n}"
        )));
    }
    let l = f64::from(looks);
    if n == 0.0 {
        return Ok(if looks == 1 { 1.0 } else { 0.0 });
    }
    if n.is_infinite() {
        return Ok(0.0);
    }
    Ok((l * l.ln() + (l - 1.0) * n.ln() - l * n - ln_gamma_int(looks)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(looks: u32, count: usize, seed: u64) -> (f64, f64, Vec<f64>) {
        let field = gamma_speckle_field(SpeckleConfig::new(looks, seed).unwrap(), 1, count).unwrap();
        let data = field.into_data();
        let mean = data.iter().sum::<f64>() / count as f64;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        (mean, var, data)
    }

    #[test]
    fn speckle_is_unit_mean() {
        let (mean, _, _) = moments(4, 1_000_000, 11);
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn single_look_variance_and_median() {
        let (_, var, data) = moments(1, 1_000_000, 12);
        assert!((0.95..=1.05).contains(&var), "variance {var}");
        let above = data.iter().filter(|&&v| v > std::f64::consts::LN_2).count() as f64;
        let frac = above / data.len() as f64;
        assert!((0.495..=0.505).contains(&frac), "fraction above median {frac}");
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let cfg = SpeckleConfig::new(1, 0).unwrap();
        assert!(matches!(gamma_speckle_field(cfg, 0, 5), Err(Error::InvalidArgument(_))));
        assert!(SpeckleConfig::new(0, 0).is_err());
    }

    #[test]
    fn field_is_deterministic() {
        let cfg = SpeckleConfig::new(3, 99).unwrap();
        let a = gamma_speckle_field(cfg, 17, 9).unwrap();
        let b = gamma_speckle_field(cfg, 17, 9).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = gamma_speckle_field(SpeckleConfig::new(3, 100).unwrap(), 17, 9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn apply_speckle_examples() {
        let x = GrayImage::from_fn(3, 4, |r, c| (r + c) as f64 * 0.1).unwrap();
        let n = gamma_speckle_field(SpeckleConfig::new(1, 5).unwrap(), 3, 4).unwrap();
        let zero = GrayImage::filled(3, 4, 0.0).unwrap();
        assert!(apply_speckle(&zero, &n).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = GrayImage::filled(3, 4, 1.0).unwrap();
        assert_eq!(apply_speckle(&x, &ones).unwrap(), x);

        let two = GrayImage::filled(1, 1, 2.0).unwrap();
        let half = GrayImage::filled(1, 1, 0.5).unwrap();
        assert_eq!(apply_speckle(&two, &half).unwrap().data(), &[1.0]);

        let wrong = GrayImage::filled(4, 3, 1.0).unwrap();
        assert!(matches!(apply_speckle(&x, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn gamma_pdf_closed_forms() {
        assert_eq!(gamma_pdf(0.0, 1).unwrap(), 1.0);
        assert!((gamma_pdf(1.0, 1).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        // L=2: 4 n e^{-2n}
        let n = 0.7;
        assert!((gamma_pdf(n, 2).unwrap() - 4.0 * n * (-2.0 * n).exp()).abs() < 1e-14);
        assert!(gamma_pdf(-0.1, 1).is_err());
    }

    /// Composite Simpson over [0, 50]; the oracle shares nothing with the
    /// density beyond evaluating it.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
        let h = (b - a) / intervals as f64;
        let mut acc = f(a) + f(b);
        for i in 1..intervals {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn gamma_pdf_integrates_to_one() {
        for looks in [1, 2, 4, 16] {
            let total = simpson(|n| gamma_pdf(n, looks).unwrap(), 0.0, 50.0, 200_000);
            assert!((total - 1.0).abs() < 1e-6, "L={looks}: integral {total}");
        }
    }
}
