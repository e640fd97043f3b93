//! Same-size 2D convolution, stride 1, zero padding `(K-1)/2`.
//!
//! Cross-correlation convention: `out[m](y, x) = b[m] + sum_n sum_{i,j}
//! w[m, n, i, j] * in[n](y + i - p, x + j - p)`; kernels are not flipped.

use serde::{Deserialize, Serialize};

use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd kernel side length.
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("convolution channel counts must be positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().len()
    }
}

/// For kernel offset `k` (0-based, padding `p`) and a row or column extent
/// `len`, the output index range whose shifted input index `o + k - p`
/// stays inside `[0, len)`.
#[inline]
fn valid_range(k: usize, p: usize, len: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = (len + p).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn check_input(x: &Tensor, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if x.shape().channels != spec.in_channels {
        return Err(Error::shape(
            format!("{} input channels", spec.in_channels),
            format!("{} channels in {}", x.shape().channels, x.shape()),
        ));
    }
    Ok(())
}

fn check_params(weights: &[f64], bias: &[f64], spec: &ConvSpec) -> Result<()> {
    if weights.len() != spec.weight_len() {
        return Err(Error::shape(
            format!("{} weights for {}", spec.weight_len(), spec.weight_shape()),
            format!("{} weights", weights.len()),
        ));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::shape(
            format!("{} biases", spec.out_channels),
            format!("{} biases", bias.len()),
        ));
    }
    Ok(())
}

pub fn conv2d(x: &Tensor, weights: &[f64], bias: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    check_input(x, spec)?;
    check_params(weights, bias, spec)?;
    let s = x.shape();
    let (h, w, k, p) = (s.height, s.width, spec.kernel, spec.padding());
    let mut out = Tensor::zeros(Shape::new(s.batch, spec.out_channels, h, w));
    for b in 0..s.batch {
        for m in 0..spec.out_channels {
            let plane = out.plane_mut(b, m);
            plane.fill(bias[m]);
            for n in 0..spec.in_channels {
                let input = x.plane(b, n);
                let kernel = &weights[(m * spec.in_channels + n) * k * k..][..k * k];
                for ki in 0..k {
                    let (y0, y1) = valid_range(ki, p, h);
                    for kj in 0..k {
                        let wv = kernel[ki * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(kj, p, w);
                        if x0 == x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let src = &input[(y + ki - p) * w + x0 + kj - p..][..x1 - x0];
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of a scalar loss given `grad_out = dL/d(conv output)`.
pub fn conv2d_backward(
    x: &Tensor,
    weights: &[f64],
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    check_input(x, spec)?;
    let s = x.shape();
    grad_out.ensure_shape(Shape::new(s.batch, spec.out_channels, s.height, s.width))?;
    let (h, w, k, p) = (s.height, s.width, spec.kernel, spec.padding());
    let mut gx = Tensor::zeros(s);
    let mut gw = vec![0.0; spec.weight_len()];
    let mut gb = vec![0.0; spec.out_channels];
    for b in 0..s.batch {
        for m in 0..spec.out_channels {
            let go = grad_out.plane(b, m);
            gb[m] += go.iter().sum::<f64>();
            for n in 0..spec.in_channels {
                let input = x.plane(b, n);
                let base = (m * spec.in_channels + n) * k * k;
                for ki in 0..k {
                    let (y0, y1) = valid_range(ki, p, h);
                    for kj in 0..k {
                        let (x0, x1) = valid_range(kj, p, w);
                        if x0 == x1 {
                            continue;
                        }
                        let wv = weights[base + ki * k + kj];
                        let mut acc = 0.0;
                        let gxp = gx.plane_mut(b, n);
                        for y in y0..y1 {
                            let off = (y + ki - p) * w + x0 + kj - p;
                            let g = &go[y * w + x0..y * w + x1];
                            let src = &input[off..off + (x1 - x0)];
                            acc += g.iter().zip(src).map(|(a, c)| a * c).sum::<f64>();
                            for (d, gv) in gxp[off..off + (x1 - x0)].iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                        gw[base + ki * k + kj] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}


#[cfg(test)]
mod tests {
    use super::reference::naive_conv2d;
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel() {
        let spec = ConvSpec::new(1, 1, 1).unwrap();
        let x = random(Shape::new(2, 1, 5, 4), 1);
        assert_eq!(conv2d(&x, &[1.0], &[0.0], &spec).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let spec = ConvSpec::new(1, 1, 3).unwrap();
        let c = 0.3;
        let x = Tensor::from_fn(Shape::new(1, 1, 5, 6), |_| c);
        let out = conv2d(&x, &[1.0; 9], &[0.0], &spec).unwrap();
        assert!((out.at(0, 0, 2, 2) - 9.0 * c).abs() < 1e-15);
        assert!((out.at(0, 0, 0, 0) - 4.0 * c).abs() < 1e-15);
        assert!((out.at(0, 0, 4, 5) - 4.0 * c).abs() < 1e-15);
        assert!((out.at(0, 0, 0, 3) - 6.0 * c).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_reference() {
        let spec = ConvSpec::new(3, 4, 3).unwrap();
        let x = random(Shape::new(4, 3, 9, 9), 2);
        let w = random(spec.weight_shape(), 3).into_data();
        let b = random(Shape::new(1, 1, 1, 4), 4).into_data();
        let fast = conv2d(&x, &w, &b, &spec).unwrap();
        let slow = naive_conv2d(&x, &w, &b, &spec);
        let diff = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn kernel_larger_than_image() {
        let spec = ConvSpec::new(2, 1, 7).unwrap();
        let x = random(Shape::new(1, 2, 3, 2), 5);
        let w = random(spec.weight_shape(), 6).into_data();
        let fast = conv2d(&x, &w, &[0.1], &spec).unwrap();
        let slow = naive_conv2d(&x, &w, &[0.1], &spec);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let spec = ConvSpec::new(2, 1, 3).unwrap();
        let x = random(Shape::new(1, 3, 4, 4), 7);
        assert!(matches!(
            conv2d(&x, &[0.0; 18], &[0.0], &spec),
            Err(Error::Shape { .. })
        ));
        assert!(ConvSpec::new(1, 1, 4).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = ConvSpec::new(2, 3, 3).unwrap();
        let x = random(Shape::new(2, 2, 5, 4), 8);
        let w = random(spec.weight_shape(), 9).into_data();
        let b = random(Shape::new(1, 1, 1, 3), 10).into_data();
        let probe = random(Shape::new(2, 3, 5, 4), 11);
        let loss = |x: &Tensor, w: &[f64], b: &[f64]| -> f64 {
            let out = conv2d(x, w, b, &spec).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, c)| a * c).sum()
        };
        let grads = conv2d_backward(&x, &w, &spec, &probe).unwrap();
        let h = 1e-5;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - grads.weights[i]).abs() < 1e-8, "w[{i}]");
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - grads.bias[i]).abs() < 1e-8, "b[{i}]");
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - grads.input.data()[i]).abs() < 1e-8, "x[{i}]");
        }
    }
}
