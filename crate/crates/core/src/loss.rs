//! Hybrid despeckling cost.
//!
//! ```text
//! loss = MSE(X_hat, X) + lambda * KL(p_noise_hat || p_gamma)      [bits]
//! noise_hat = Y / max(X_hat, floor)
//! ```
//!
//! `p_noise_hat` is a soft histogram: every value spreads its unit mass over
//! nearby bin centers with a triangular kernel, so the pmf is piecewise
//! linear in each value and the KL term can be differentiated back to the
//! prediction. `p_gamma` integrates the unit-mean Gamma density over the
//! same bins. One histogram is built per call, i.e. per training batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DEFAULT_NOISE_FLOOR;
use crate::nn_engine::Tensor;
use crate::speckle_sim::gamma_pdf;

/// Subintervals of the composite Simpson rule used per bin.
const QUADRATURE_POINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub bins: usize,
    /// Upper end of the histogram support; `None` means `8 (1 + 3/sqrt(L))`.
    pub range_max: Option<f64>,
    /// Kernel half-width in units of the bin width.
    pub soft_bandwidth: f64,
    /// Added to both pmfs before the logarithm (then renormalized).
    pub epsilon_floor: f64,
    pub division_floor: f64,
    /// Evaluate the KL term but keep it out of the gradient.
    pub detach_kl: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            bins: 64,
            range_max: None,
            soft_bandwidth: 1.0,
            epsilon_floor: 1e-8,
            division_floor: DEFAULT_NOISE_FLOOR,
            detach_kl: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.bins < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {}", self.bins)));
        }
        if let Some(max) = self.range_max {
            if !(max > 0.0) || !max.is_finite() {
                return Err(Error::invalid(format!("histogram range must be positive, got {max}")));
            }
        }
        if !(self.soft_bandwidth > 0.0) {
            return Err(Error::invalid("soft-histogram bandwidth must be positive"));
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(Error::invalid("epsilon floor must be positive"));
        }
        if !(self.division_floor > 0.0) {
            return Err(Error::invalid("division floor must be positive"));
        }
        Ok(())
    }

    pub fn range_max_for(&self, looks: u32) -> f64 {
        self.range_max
            .unwrap_or_else(|| 8.0 * (1.0 + 3.0 / f64::from(looks).sqrt()))
    }

    pub fn bins_for(&self, looks: u32) -> Result<Bins> {
        self.validate()?;
        if looks == 0 {
            return Err(Error::invalid("number of looks must be at least 1"));
        }
        Bins::new(self.bins, self.range_max_for(looks))
    }
}

/// `count` equal-width bins covering `[0, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bins {
    pub count: usize,
    pub max: f64,
}

impl Bins {
    pub fn new(count: usize, max: f64) -> Result<Self> {
        if count < 2 || !(max > 0.0) || !max.is_finite() {
            return Err(Error::invalid(format!("invalid binning: {count} bins over [0, {max}]")));
        }
        Ok(Self { count, max })
    }

    pub fn width(&self) -> f64 {
        self.max / self.count as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        let w = self.width();
        (0..=self.count)
            .map(|i| if i == self.count { self.max } else { i as f64 * w })
            .collect()
    }

    pub fn center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.width()
    }

    /// Bin index of `v`, clamping out-of-range values to the edge bins.
    pub fn index_of(&self, v: f64) -> usize {
        if !(v > 0.0) {
            return 0;
        }
        ((v / self.width()) as usize).min(self.count - 1)
    }
}

/// Binned probability mass function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    pub bin_edges: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Pmf {
    pub fn new(bin_edges: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 || bin_edges.len() != probs.len() + 1 {
            return Err(Error::invalid(format!(
                "a pmf needs B >= 2 bins and B+1 edges, got {} bins and {} edges",
                probs.len(),
                bin_edges.len()
            )));
        }
        if bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("bin edges must be strictly increasing"));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { bin_edges, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Empirical pmf with each value counted in exactly one bin
    /// (out-of-range values go to the edge bins).
    pub fn hard_histogram(values: &[f64], bins: &Bins) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot histogram an empty set of values"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("histogram values must be finite"));
        }
        let mut counts = vec![0usize; bins.count];
        for &v in values {
            counts[bins.index_of(v)] += 1;
        }
        let n = values.len() as f64;
        Self::new(bins.edges(), counts.into_iter().map(|c| c as f64 / n).collect())
    }

    /// Piecewise-constant density implied by the pmf at `x`.
    pub fn density_at(&self, x: f64) -> f64 {
        match self.bin_edges.windows(2).position(|w| x >= w[0] && x < w[1]) {
            Some(j) => self.probs[j] / (self.bin_edges[j + 1] - self.bin_edges[j]),
            None => 0.0,
        }
    }
}

/// Triangular-kernel histogram of a set of values, with enough state to
/// differentiate each bin probability with respect to each value.
#[derive(Debug, Clone)]
pub struct SoftHistogram {
    pub pmf: Pmf,
    bins: Bins,
    bandwidth: f64,
    /// Value positions in bin-center units (`u = v / width - 1/2`).
    positions: Vec<f64>,
}

impl SoftHistogram {
    fn inv_width(&self) -> f64 {
        1.0 / self.bins.width()
    }

    /// Normalized kernel weights `(first bin, weights)` of a clamped
    /// position and their derivatives with respect to `u`. A position that
    /// no kernel reaches (bandwidth below one bin) goes wholly to the
    /// nearest center, with zero derivative.
    fn kernel(bins: &Bins, bandwidth: f64, u: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let last = (bins.count - 1) as f64;
        let lo = (u - bandwidth).ceil().max(0.0) as usize;
        let hi = ((u + bandwidth).floor().min(last) as usize).max(lo);
        let mut k = Vec::with_capacity(hi + 1 - lo);
        let mut dk = Vec::with_capacity(hi + 1 - lo);
        for j in lo..=hi {
            let d = u - j as f64;
            let val = 1.0 - d.abs() / bandwidth;
            if val > 0.0 {
                k.push(val);
                dk.push(-d.signum() * f64::from(d != 0.0) / bandwidth);
            } else {
                k.push(0.0);
                dk.push(0.0);
            }
        }
        let s: f64 = k.iter().sum();
        if s == 0.0 {
            return ((u.round() as usize).min(bins.count - 1), vec![1.0], vec![0.0]);
        }
        let ds: f64 = dk.iter().sum();
        let dw = k.iter().zip(&dk).map(|(kv, dkv)| (dkv * s - kv * ds) / (s * s)).collect();
        let w = k.iter().map(|kv| kv / s).collect();
        (lo, w, dw)
    }

    fn clamp_position(&self, u: f64) -> (f64, bool) {
        let last = (self.bins.count - 1) as f64;
        if u <= 0.0 {
            (0.0, true)
        } else if u >= last {
            (last, true)
        } else {
            (u, false)
        }
    }

    /// `d probs[j] / d value[i]` as `(j, derivative)` pairs; empty where the
    /// value is clamped to an edge bin.
    pub fn bin_gradients(&self, i: usize) -> Vec<(usize, f64)> {
        let (u, clamped) = self.clamp_position(self.positions[i]);
        if clamped {
            return Vec::new();
        }
        let (lo, _, dw) = Self::kernel(&self.bins, self.bandwidth, u);
        let scale = self.inv_width() / self.positions.len() as f64;
        dw.iter().enumerate().map(|(o, d)| (lo + o, d * scale)).collect()
    }

    /// Chain rule through the histogram: given `dL/d probs`, returns
    /// `dL/d value` for every value.
    pub fn backprop(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.bins.count {
            return Err(Error::shape(format!("{} bins", self.bins.count), upstream.len()));
        }
        Ok((0..self.positions.len())
            .map(|i| self.bin_gradients(i).into_iter().map(|(j, d)| upstream[j] * d).sum())
            .collect())
    }
}

pub fn soft_histogram(values: &[f64], bins: &Bins, bandwidth: f64) -> Result<SoftHistogram> {
    if values.is_empty() {
        return Err(Error::invalid("cannot histogram an empty set of values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("histogram values must be finite"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("soft-histogram bandwidth must be positive"));
    }
    let inv_w = 1.0 / bins.width();
    let positions: Vec<f64> = values.iter().map(|v| v * inv_w - 0.5).collect();
    let last = (bins.count - 1) as f64;
    let mut mass = vec![0.0; bins.count];
    for &u in &positions {
        let u = u.clamp(0.0, last);
        let (lo, w, _) = SoftHistogram::kernel(bins, bandwidth, u);
        for (o, wv) in w.iter().enumerate() {
            mass[lo + o] += wv;
        }
    }
    let n = values.len() as f64;
    let probs = mass.into_iter().map(|m| m / n).collect();
    Ok(SoftHistogram {
        pmf: Pmf::new(bins.edges(), probs)?,
        bins: *bins,
        bandwidth,
        positions,
    })
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Unit-mean Gamma law integrated over each bin, renormalized over `[0, max]`.
pub fn reference_gamma_pmf(looks: u32, bins: &Bins) -> Result<Pmf> {
    if looks == 0 {
        return Err(Error::invalid("number of looks must be at least 1"));
    }
    let edges = bins.edges();
    let mass: Vec<f64> = edges
        .windows(2)
        .map(|w| {
            simpson(
                |n| gamma_pdf(n, looks).expect("non-negative abscissa"),
                w[0],
                w[1],
                QUADRATURE_POINTS,
            )
        })
        .collect();
    let total: f64 = mass.iter().sum();
    Pmf::new(edges, mass.into_iter().map(|m| m / total).collect())
}

fn ensure_same_bins(a: &Pmf, b: &Pmf) -> Result<()> {
    let same = a.bin_edges.len() == b.bin_edges.len()
        && a.bin_edges.iter().zip(&b.bin_edges).all(|(x, y)| x.to_bits() == y.to_bits());
    if !same {
        return Err(Error::invalid("pmfs are defined on different bins"));
    }
    Ok(())
}

fn floored(p: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let z: f64 = p.iter().map(|v| v + eps).sum();
    (p.iter().map(|v| (v + eps) / z).collect(), z)
}

/// `KL(p_hat || p_ref)` in bits after flooring both pmfs by `eps` and
/// renormalizing.
pub fn kl_divergence(p_hat: &Pmf, p_ref: &Pmf, eps: f64) -> Result<f64> {
    kl_divergence_with_grad(p_hat, p_ref, eps).map(|(kl, _)| kl)
}

/// KL in bits and its gradient with respect to the unfloored `p_hat`.
pub fn kl_divergence_with_grad(p_hat: &Pmf, p_ref: &Pmf, eps: f64) -> Result<(f64, Vec<f64>)> {
    ensure_same_bins(p_hat, p_ref)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("epsilon floor must be positive"));
    }
    let (p, z) = floored(&p_hat.probs, eps);
    let (q, _) = floored(&p_ref.probs, eps);
    let mut kl = 0.0;
    let mut g = Vec::with_capacity(p.len());
    for (pi, qi) in p.iter().zip(&q) {
        let l = (pi / qi).log2();
        kl += pi * l;
        g.push(l + std::f64::consts::LOG2_E);
    }
    // p' = (p + eps) / z with z = sum(p + eps) depending on p as well
    let mean_g: f64 = p.iter().zip(&g).map(|(pi, gi)| pi * gi).sum();
    let grad = g.iter().map(|gi| (gi - mean_g) / z).collect();
    Ok((kl.max(0.0), grad))
}

/// Mean squared error and its gradient with respect to `prediction`.
pub fn mse(prediction: &Tensor, reference: &Tensor) -> Result<(f64, Tensor)> {
    reference.ensure_shape(prediction.shape())?;
    let n = prediction.len() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(prediction.shape());
    for ((g, p), r) in grad.data_mut().iter_mut().zip(prediction.data()).zip(reference.data()) {
        let d = p - r;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub mse: f64,
    /// KL term in bits (before weighting by lambda).
    pub kl: f64,
    /// `d total / d prediction`.
    pub grad: Tensor,
}

/// The hybrid cost with its reference pmf precomputed.
#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub cfg: LossConfig,
    pub looks: u32,
    bins: Bins,
    reference: Pmf,
}

impl HybridLoss {
    pub fn new(cfg: LossConfig, looks: u32) -> Result<Self> {
        let bins = cfg.bins_for(looks)?;
        let reference = reference_gamma_pmf(looks, &bins)?;
        Ok(Self {
            cfg,
            looks,
            bins,
            reference,
        })
    }

    pub fn bins(&self) -> &Bins {
        &self.bins
    }

    pub fn reference(&self) -> &Pmf {
        &self.reference
    }

    pub fn evaluate(&self, noisy: &Tensor, prediction: &Tensor, clean: &Tensor) -> Result<LossOutput> {
        noisy.ensure_shape(prediction.shape())?;
        let (mse_value, mut grad) = mse(prediction, clean)?;
        let floor = self.cfg.division_floor;
        let noise_hat: Vec<f64> = noisy
            .data()
            .iter()
            .zip(prediction.data())
            .map(|(y, x)| y / x.max(floor))
            .collect();
        let hist = soft_histogram(&noise_hat, &self.bins, self.cfg.soft_bandwidth)?;
        let (kl, dkl_dp) = kl_divergence_with_grad(&hist.pmf, &self.reference, self.cfg.epsilon_floor)?;
        let lambda = self.cfg.lambda;
        let total = if lambda == 0.0 { mse_value } else { mse_value + lambda * kl };
        if lambda != 0.0 && !self.cfg.detach_kl {
            let dkl_dn = hist.backprop(&dkl_dp)?;
            for (i, g) in grad.data_mut().iter_mut().enumerate() {
                let x = prediction.data()[i];
                if x > floor && dkl_dn[i] != 0.0 {
                    *g += lambda * dkl_dn[i] * (-noisy.data()[i] / (x * x));
                }
            }
        }
        Ok(LossOutput {
            total,
            mse: mse_value,
            kl,
            grad,
        })
    }
}

/// One-shot form of [`HybridLoss::evaluate`].
pub fn total_loss(
    noisy: &Tensor,
    prediction: &Tensor,
    clean: &Tensor,
    cfg: &LossConfig,
    looks: u32,
) -> Result<LossOutput> {
    HybridLoss::new(*cfg, looks)?.evaluate(noisy, prediction, clean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_engine::Shape;
    use crate::rng::rng_from_seed;
    use crate::speckle_sim::{gamma_speckle_field, SpeckleConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn default_bins(looks: u32) -> Bins {
        LossConfig::default().bins_for(looks).unwrap()
    }

    #[test]
    fn default_range_follows_looks() {
        assert_eq!(LossConfig::default().range_max_for(1), 32.0);
        assert_eq!(LossConfig::default().range_max_for(4), 20.0);
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        assert_eq!(mse(&a, &b).unwrap().0, 4.0);
        let (v, g) = mse(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let c = Tensor::zeros(Shape::new(1, 1, 2, 1));
        assert!(matches!(mse(&a, &c), Err(Error::Shape { .. })));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(1);
        let shape = Shape::new(1, 1, 4, 4);
        let p = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let (_, g) = mse(&p, &r).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.data_mut()[i] += h;
            pm.data_mut()[i] -= h;
            let fd = (mse(&pp, &r).unwrap().0 - mse(&pm, &r).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_histogram_kernel_examples() {
        let bins = default_bins(1); // width 0.5, centers at 0.25 + 0.5 j
        let at_center = vec![bins.center(5); 10];
        let h = soft_histogram(&at_center, &bins, 1.0).unwrap();
        for (j, p) in h.pmf.probs.iter().enumerate() {
            assert_eq!(*p, if j == 5 { 1.0 } else { 0.0 });
        }
        let midway = [0.5 * (bins.center(3) + bins.center(4))];
        let h = soft_histogram(&midway, &bins, 1.0).unwrap();
        assert_eq!(h.pmf.probs[3], 0.5);
        assert_eq!(h.pmf.probs[4], 0.5);
        assert!(soft_histogram(&[], &bins, 1.0).is_err());
    }

    #[test]
    fn out_of_range_values_clamp_to_edge_bins() {
        let bins = Bins::new(4, 2.0).unwrap();
        let h = soft_histogram(&[0.0, 100.0], &bins, 1.0).unwrap();
        assert_eq!(h.pmf.probs, vec![0.5, 0.0, 0.0, 0.5]);
        assert!(h.bin_gradients(0).is_empty() && h.bin_gradients(1).is_empty());
    }

    #[test]
    fn soft_histogram_of_gamma_draws_matches_reference() {
        let bins = default_bins(4);
        let draws = gamma_speckle_field(SpeckleConfig::new(4, 2).unwrap(), 1, 100_000).unwrap();
        let h = soft_histogram(draws.data(), &bins, 1.0).unwrap();
        let reference = reference_gamma_pmf(4, &bins).unwrap();
        let kl = kl_divergence(&h.pmf, &reference, 1e-8).unwrap();
        assert!(kl < 0.01, "KL {kl} bits");
    }

    #[test]
    fn reference_pmf_properties() {
        for looks in [1, 2, 4, 16] {
            let pmf = reference_gamma_pmf(looks, &default_bins(looks)).unwrap();
            assert!((pmf.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let exp = reference_gamma_pmf(1, &default_bins(1)).unwrap();
        let argmax = exp.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 0);
        // bin [0, 0.5] of the exponential holds 1 - e^{-1/2}
        assert!((exp.probs[0] - (1.0 - (-0.5f64).exp())).abs() < 1e-9);
    }

    #[test]
    fn reference_pmf_refinement_converges_in_l1() {
        // L1 distance between the piecewise-constant reconstruction and the density,
        // integrated with a fine midpoint rule on [0, 4] where the L=2 law lives
        let looks = 2;
        let l1 = |bins: usize| {
            let b = Bins::new(bins, 12.0).unwrap();
            let pmf = reference_gamma_pmf(looks, &b).unwrap();
            let steps = 200_000;
            let h = 12.0 / steps as f64;
            (0..steps)
                .map(|i| {
                    let x = (i as f64 + 0.5) * h;
                    (pmf.density_at(x) - gamma_pdf(x, looks).unwrap()).abs() * h
                })
                .sum::<f64>()
        };
        let errors: Vec<f64> = [64, 128, 256, 512].iter().map(|&b| l1(b)).collect();
        for w in errors.windows(2) {
            assert!(w[1] < w[0], "{errors:?}");
        }
    }

    #[test]
    fn kl_examples() {
        let bins = Bins::new(2, 2.0).unwrap();
        let p = Pmf::new(bins.edges(), vec![1.0, 0.0]).unwrap();
        let q = Pmf::new(bins.edges(), vec![0.5, 0.5]).unwrap();
        let kl = kl_divergence(&p, &q, 1e-8).unwrap();
        assert!((kl - 1.0).abs() < 1e-6, "{kl}");
        assert_eq!(kl_divergence(&q, &q, 1e-8).unwrap(), 0.0);
        let other = Pmf::new(Bins::new(2, 3.0).unwrap().edges(), vec![0.5, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&p, &other, 1e-8), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let bins = Bins::new(5, 5.0).unwrap();
        let p = Pmf::new(bins.edges(), vec![0.1, 0.4, 0.2, 0.3, 0.0]).unwrap();
        let q = Pmf::new(bins.edges(), vec![0.3, 0.3, 0.2, 0.1, 0.1]).unwrap();
        let (_, g) = kl_divergence_with_grad(&p, &q, 1e-3).unwrap();
        let h = 1e-6;
        let eval = |probs: Vec<f64>| {
            // bypass Pmf validation: perturbed vectors no longer sum to 1
            let pp = Pmf { bin_edges: bins.edges(), probs };
            kl_divergence_with_grad(&pp, &q, 1e-3).unwrap().0
        };
        for j in 0..5 {
            let (mut a, mut b) = (p.probs.clone(), p.probs.clone());
            a[j] += h;
            b[j] -= h;
            if b[j] < 0.0 {
                continue;
            }
            let fd = (eval(a) - eval(b)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "bin {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn lambda_zero_is_bitwise_mse() {
        let mut rng = rng_from_seed(3);
        let shape = Shape::new(2, 1, 6, 6);
        let clean = Tensor::from_fn(shape, |_| rng.random_range(0.1..1.0));
        let noisy = Tensor::from_fn(shape, |i| clean.data()[i] * rng.random_range(0.0..3.0));
        let pred = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let out = total_loss(&noisy, &pred, &clean, &cfg, 1).unwrap();
        let (m, g) = mse(&pred, &clean).unwrap();
        assert_eq!(out.total.to_bits(), m.to_bits());
        assert!(out.grad.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn true_clean_prediction_has_small_kl() {
        let mut rng = rng_from_seed(4);
        let shape = Shape::new(1, 1, 128, 128);
        let clean = Tensor::from_fn(shape, |_| rng.random_range(0.05..1.0));
        let noise = gamma_speckle_field(SpeckleConfig::new(1, 5).unwrap(), 128, 128).unwrap();
        let noisy = Tensor::from_fn(shape, |i| clean.data()[i] * noise.data()[i]);
        let out = total_loss(&noisy, &clean, &clean, &LossConfig::default(), 1).unwrap();
        assert!(out.kl < 0.05, "KL {} bits", out.kl);
        assert_eq!(out.mse, 0.0);
    }

    #[test]
    fn total_gradient_matches_finite_differences_away_from_kinks() {
        let mut rng = rng_from_seed(5);
        let shape = Shape::new(1, 1, 16, 16);
        let clean = Tensor::from_fn(shape, |_| rng.random_range(0.2..1.0));
        let noise = gamma_speckle_field(SpeckleConfig::new(1, 9).unwrap(), 16, 16).unwrap();
        let noisy = Tensor::from_fn(shape, |i| clean.data()[i] * noise.data()[i]);
        let pred = Tensor::from_fn(shape, |i| clean.data()[i] * rng.random_range(0.7..1.3));
        let cfg = LossConfig {
            lambda: 1.0,
            range_max: Some(8.0),
            bins: 32,
            ..LossConfig::default()
        };
        let loss = HybridLoss::new(cfg, 1).unwrap();
        let out = loss.evaluate(&noisy, &pred, &clean).unwrap();
        let bins = *loss.bins();
        // kernel segment of a prediction value: changes when noise_hat crosses a center
        let segment = |x: f64, y: f64| {
            let u = y / x.max(cfg.division_floor) / bins.width() - 0.5;
            (u.floor() as i64, x > cfg.division_floor)
        };
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..pred.len() {
            let (x, y) = (pred.data()[i], noisy.data()[i]);
            if segment(x + h, y) != segment(x, y) || segment(x - h, y) != segment(x, y) {
                continue;
            }
            let (mut pp, mut pm) = (pred.clone(), pred.clone());
            pp.data_mut()[i] += h;
            pm.data_mut()[i] -= h;
            let fd = (loss.evaluate(&noisy, &pp, &clean).unwrap().total
                - loss.evaluate(&noisy, &pm, &clean).unwrap().total)
                / (2.0 * h);
            let g = out.grad.data()[i];
            assert!((fd - g).abs() <= 1e-3 * fd.abs().max(g.abs()) + 1e-8, "pixel {i}: fd {fd} vs {g}");
            checked += 1;
        }
        assert!(checked > 200, "only {checked} coordinates away from kinks");
    }

    #[test]
    fn mse_grows_with_perturbation() {
        let mut rng = rng_from_seed(6);
        let shape = Shape::new(1, 1, 16, 16);
        let clean = Tensor::from_fn(shape, |_| rng.random_range(0.2..1.0));
        let dir = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let mut last = -1.0;
        for s in [0.0, 0.01, 0.05, 0.1, 0.3] {
            let pred = Tensor::from_fn(shape, |i| clean.data()[i] + s * dir.data()[i]);
            let (m, _) = mse(&pred, &clean).unwrap();
            assert!(m > last);
            last = m;
        }
    }

    proptest! {
        #[test]
        fn soft_histogram_mass_is_conserved(
            values in proptest::collection::vec(0.0f64..40.0, 1..50),
            bandwidth in 0.3f64..3.0,
        ) {
            let bins = default_bins(1);
            let h = soft_histogram(&values, &bins, bandwidth).unwrap();
            prop_assert!((h.pmf.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..values.len() {
                let row: f64 = h.bin_gradients(i).iter().map(|(_, d)| d).sum();
                prop_assert!(row.abs() < 1e-9);
            }
        }

        #[test]
        fn kl_is_non_negative(
            a in proptest::collection::vec(0.0f64..1.0, 6),
            b in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            prop_assume!(sa > 0.0 && sb > 0.0);
            let edges = Bins::new(6, 3.0).unwrap().edges();
            let p = Pmf::new(edges.clone(), a.iter().map(|v| v / sa).collect()).unwrap();
            let q = Pmf::new(edges, b.iter().map(|v| v / sb).collect()).unwrap();
            let kl = kl_divergence(&p, &q, 1e-8).unwrap();
            prop_assert!(kl >= 0.0 && kl.is_finite());
            prop_assert_eq!(kl_divergence(&p, &p, 1e-8).unwrap(), 0.0);
        }
    }
}
