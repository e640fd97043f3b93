use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel batch normalization state.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into the running estimates as
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        let bn = Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
            momentum,
        };
        bn.validate()?;
        Ok(bn)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.scale.len();
        if c == 0 || self.shift.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::invalid("batch-norm buffers must share a positive channel count"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("batch-norm epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid(format!(
                "batch-norm momentum must lie in (0, 1), got {}",
                self.momentum
            )));
        }
        if self.running_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("batch-norm running variance must be non-negative"));
        }
        Ok(())
    }

    fn check_channels(&self, x: &Tensor) -> Result<()> {
        if x.shape().channels != self.channels() {
            return Err(Error::shape(
                format!("{} channels", self.channels()),
                format!("{} channels in {}", x.shape().channels, x.shape()),
            ));
        }
        Ok(())
    }
}

/// Saved normalized activations for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn batchnorm_forward(x: &Tensor, bn: &mut BatchNorm, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Train => batchnorm_train(x, bn).map(|(y, _)| y),
        Mode::Infer => batchnorm_infer(x, bn),
    }
}

pub fn batchnorm_infer(x: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    bn.check_channels(x)?;
    let s = x.shape();
    let mut out = x.clone();
    for c in 0..s.channels {
        let gain = bn.scale[c] / (bn.running_var[c] + bn.epsilon).sqrt();
        let (mean, shift) = (bn.running_mean[c], bn.shift[c]);
        for b in 0..s.batch {
            for v in out.plane_mut(b, c) {
                *v = (*v - mean) * gain + shift;
            }
        }
    }
    Ok(out)
}

pub fn batchnorm_train(x: &Tensor, bn: &mut BatchNorm) -> Result<(Tensor, BnCache)> {
    bn.check_channels(x)?;
    let s = x.shape();
    let count = s.batch * s.plane();
    if count < 2 {
        return Err(Error::invalid(
            "train-mode batch normalization needs at least two values per channel",
        ));
    }
    let n = count as f64;
    let mut out = x.clone();
    let mut normalized = x.clone();
    let mut inv_std = vec![0.0; s.channels];
    for c in 0..s.channels {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut sum = 0.0;
        for b in 0..s.batch {
            for &v in x.plane(b, c) {
                sum += v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        // a constant channel normalizes to exactly zero
        let mean = if lo == hi { lo } else { sum / n };
        let var = (0..s.batch)
            .map(|b| x.plane(b, c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / n;
        let istd = 1.0 / (var + bn.epsilon).sqrt();
        inv_std[c] = istd;
        let (gamma, beta) = (bn.scale[c], bn.shift[c]);
        for b in 0..s.batch {
            let norm = normalized.plane_mut(b, c);
            for v in norm.iter_mut() {
                *v = (*v - mean) * istd;
            }
            for (o, z) in out.plane_mut(b, c).iter_mut().zip(normalized.plane(b, c)) {
                *o = gamma * z + beta;
            }
        }
        let m = bn.momentum;
        bn.running_mean[c] = m * bn.running_mean[c] + (1.0 - m) * mean;
        bn.running_var[c] = m * bn.running_var[c] + (1.0 - m) * var;
    }
    Ok((out, BnCache { normalized, inv_std }))
}

pub struct BnGrads {
    pub input: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn batchnorm_backward(cache: &BnCache, scale: &[f64], grad_out: &Tensor) -> Result<BnGrads> {
    grad_out.ensure_shape(cache.normalized.shape())?;
    let s = grad_out.shape();
    let n = (s.batch * s.plane()) as f64;
    let mut gx = Tensor::zeros(s);
    let mut gscale = vec![0.0; s.channels];
    let mut gshift = vec![0.0; s.channels];
    for c in 0..s.channels {
        let (mut sum_dy, mut sum_dy_z) = (0.0, 0.0);
        for b in 0..s.batch {
            for (dy, z) in grad_out.plane(b, c).iter().zip(cache.normalized.plane(b, c)) {
                sum_dy += dy;
                sum_dy_z += dy * z;
            }
        }
        gscale[c] = sum_dy_z;
        gshift[c] = sum_dy;
        let k = scale[c] * cache.inv_std[c] / n;
        for b in 0..s.batch {
            let z = cache.normalized.plane(b, c);
            let dy = grad_out.plane(b, c);
            for ((g, dyv), zv) in gx.plane_mut(b, c).iter_mut().zip(dy).zip(z) {
                *g = k * (n * dyv - sum_dy - zv * sum_dy_z);
            }
        }
    }
    Ok(BnGrads {
        input: gx,
        scale: gscale,
        shift: gshift,
    })
}
