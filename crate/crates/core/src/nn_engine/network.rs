use serde::{Deserialize, Serialize};

use super::batchnorm::{batchnorm_backward, batchnorm_infer, batchnorm_train, BatchNorm, BnCache};
use super::conv::{conv2d, conv2d_backward, ConvSpec};
use super::relu::{relu_backward, relu_forward};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Where batch normalization sits relative to the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    #[default]
    ConvBnRelu,
    ConvReluBn,
}

impl LayerOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerOrder::ConvBnRelu => "conv_bn_relu",
            LayerOrder::ConvReluBn => "conv_relu_bn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv_bn_relu" => Some(LayerOrder::ConvBnRelu),
            "conv_relu_bn" => Some(LayerOrder::ConvReluBn),
            _ => None,
        }
    }
}

/// Learnable and running state of one convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `(out_channels, in_channels, K, K)`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

impl LayerParams {
    pub fn validate(&self, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        self.weights.ensure_shape(spec.weight_shape())?;
        if self.bias.len() != spec.out_channels {
            return Err(Error::shape(
                format!("{} biases", spec.out_channels),
                format!("{} biases", self.bias.len()),
            ));
        }
        if let Some(bn) = &self.bn {
            bn.validate()?;
            if bn.channels() != spec.out_channels {
                return Err(Error::shape(
                    format!("{} batch-norm channels", spec.out_channels),
                    format!("{} channels", bn.channels()),
                ));
            }
        }
        Ok(())
    }
}

/// Convolution followed by optional batch normalization and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: ConvSpec,
    pub params: LayerParams,
    pub relu: bool,
    pub order: LayerOrder,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input: Tensor,
    bn: Option<BnCache>,
    relu_input: Option<Tensor>,
}

/// Intermediate values recorded by a train-mode forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    traces: Vec<LayerTrace>,
    output_shape: Option<Shape>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

impl Layer {
    fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, self.params.weights.data(), &self.params.bias, &self.spec)?;
        let bn = self.params.bn.as_ref();
        match self.order {
            LayerOrder::ConvBnRelu => {
                if let Some(bn) = bn {
                    y = batchnorm_infer(&y, bn)?;
                }
                if self.relu {
                    y = relu_forward(&y);
                }
            }
            LayerOrder::ConvReluBn => {
                if self.relu {
                    y = relu_forward(&y);
                }
                if let Some(bn) = bn {
                    y = batchnorm_infer(&y, bn)?;
                }
            }
        }
        Ok(y)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, LayerTrace)> {
        let mut y = conv2d(x, self.params.weights.data(), &self.params.bias, &self.spec)?;
        let mut trace = LayerTrace {
            input: x.clone(),
            bn: None,
            relu_input: None,
        };
        let relu = self.relu;
        let apply_bn = |y: Tensor, trace: &mut LayerTrace, bn: Option<&mut BatchNorm>| -> Result<Tensor> {
            match bn {
                Some(bn) => {
                    let (out, cache) = batchnorm_train(&y, bn)?;
                    trace.bn = Some(cache);
                    Ok(out)
                }
                None => Ok(y),
            }
        };
        let apply_relu = |y: Tensor, trace: &mut LayerTrace| -> Tensor {
            if relu {
                let out = relu_forward(&y);
                trace.relu_input = Some(y);
                out
            } else {
                y
            }
        };
        match self.order {
            LayerOrder::ConvBnRelu => {
                y = apply_bn(y, &mut trace, self.params.bn.as_mut())?;
                y = apply_relu(y, &mut trace);
            }
            LayerOrder::ConvReluBn => {
                y = apply_relu(y, &mut trace);
                y = apply_bn(y, &mut trace, self.params.bn.as_mut())?;
            }
        }
        Ok((y, trace))
    }

    fn backward(&self, trace: &LayerTrace, grad_out: Tensor) -> Result<(Tensor, LayerGrads)> {
        let g = grad_out;
        let bn_step = |g: Tensor| -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
            match (&self.params.bn, &trace.bn) {
                (Some(bn), Some(cache)) => {
                    let r = batchnorm_backward(cache, &bn.scale, &g)?;
                    Ok((r.input, Some((r.scale, r.shift))))
                }
                (None, None) => Ok((g, None)),
                _ => Err(Error::State("tape does not match layer batch-norm configuration".into())),
            }
        };
        let relu_step = |g: Tensor| -> Result<Tensor> {
            match (&trace.relu_input, self.relu) {
                (Some(pre), true) => relu_backward(pre, &g),
                (None, false) => Ok(g),
                _ => Err(Error::State("tape does not match layer activation configuration".into())),
            }
        };
        let (g, bn_grads) = match self.order {
            LayerOrder::ConvBnRelu => bn_step(relu_step(g)?)?,
            LayerOrder::ConvReluBn => {
                let (gi, gb) = bn_step(g)?;
                (relu_step(gi)?, gb)
            }
        };
        let conv = conv2d_backward(&trace.input, self.params.weights.data(), &self.spec, &g)?;
        let (bn_scale, bn_shift) = match bn_grads {
            Some((s, t)) => (Some(s), Some(t)),
            None => (None, None),
        };
        Ok((
            conv.input,
            LayerGrads {
                weights: conv.weights,
                bias: conv.bias,
                bn_scale,
                bn_shift,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_scale: Option<Vec<f64>>,
    pub bn_shift: Option<Vec<f64>>,
}

/// Gradients for every learnable buffer plus the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub input: Tensor,
}

impl Gradients {
    /// Flat views in the same order as [`Network::parameters_mut`].
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
            if let (Some(s), Some(t)) = (&l.bn_scale, &l.bn_shift) {
                out.push(s.as_slice());
                out.push(t.as_slice());
            }
        }
        out
    }
}

/// A chain of layers evaluated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].spec.out_channels != pair[1].spec.in_channels {
                return Err(Error::shape(
                    format!("layer {} input channels = {}", i + 1, pair[0].spec.out_channels),
                    pair[1].spec.in_channels,
                ));
            }
        }
        for l in &layers {
            l.params.validate(&l.spec)?;
        }
        Ok(Self { layers })
    }

    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.layers[0].forward_infer(x)?;
        for layer in &self.layers[1..] {
            y = layer.forward_infer(&y)?;
        }
        Ok(y)
    }

    /// Forward pass with batch statistics; updates the running statistics
    /// and records what [`Network::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Tape)> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut y = x.clone();
        for layer in &mut self.layers {
            let (out, trace) = layer.forward_train(&y)?;
            traces.push(trace);
            y = out;
        }
        let tape = Tape {
            traces,
            output_shape: Some(y.shape()),
        };
        Ok((y, tape))
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect
    /// to the network output is `upstream`. Uses the current parameters,
    /// which must be the ones the tape was recorded with.
    pub fn backward(&self, tape: &Tape, upstream: &Tensor) -> Result<Gradients> {
        let out_shape = match tape.output_shape {
            Some(s) if tape.traces.len() == self.layers.len() => s,
            Some(_) => return Err(Error::State("tape was recorded by a different network".into())),
            None => return Err(Error::State("backward called without a recorded forward pass".into())),
        };
        upstream.ensure_shape(out_shape)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (layer, trace) in self.layers.iter().zip(&tape.traces).rev() {
            let (gi, lg) = layer.backward(trace, g)?;
            grads.push(lg);
            g = gi;
        }
        grads.reverse();
        Ok(Gradients { layers: grads, input: g })
    }

    /// Mutable views of every learnable buffer: per layer weights, bias,
    /// then batch-norm scale and shift when present.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.params.weights.data_mut());
            out.push(l.params.bias.as_mut_slice());
            if let Some(bn) = &mut l.params.bn {
                out.push(bn.scale.as_mut_slice());
                out.push(bn.shift.as_mut_slice());
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.params.weights.data());
            out.push(l.params.bias.as_slice());
            if let Some(bn) = &l.params.bn {
                out.push(bn.scale.as_slice());
                out.push(bn.shift.as_slice());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_engine::init::he_init;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn network(order: LayerOrder, seed: u64) -> Network {
        let specs = [
            ConvSpec::new(1, 3, 3).unwrap(),
            ConvSpec::new(3, 2, 3).unwrap(),
            ConvSpec::new(2, 1, 1).unwrap(),
        ];
        let mut rng = rng_from_seed(seed);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut params = he_init(spec, seed + i as u64, i < 2);
                params.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
                if let Some(bn) = &mut params.bn {
                    bn.scale.iter_mut().for_each(|s| *s = rng.random_range(0.5..1.5));
                    bn.shift.iter_mut().for_each(|s| *s = rng.random_range(-0.5..0.5));
                }
                Layer {
                    spec: *spec,
                    params,
                    relu: i == 1,
                    order,
                }
            })
            .collect();
        Network::new(layers).unwrap()
    }

    fn loss_and_grad(out: &Tensor, probe: &Tensor) -> (f64, Tensor) {
        let loss = out.data().iter().zip(probe.data()).map(|(a, p)| 0.5 * (a - p) * (a - p)).sum();
        let g = Tensor::from_fn(out.shape(), |i| out.data()[i] - probe.data()[i]);
        (loss, g)
    }

    fn check_order(order: LayerOrder) {
        let net = network(order, 3);
        let mut rng = rng_from_seed(4);
        let x = Tensor::from_fn(Shape::new(2, 1, 5, 5), |_| rng.random_range(0.0..2.0));
        let probe = Tensor::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0));
        let eval = |net: &Network, x: &Tensor| {
            let mut n = net.clone();
            let (out, _) = n.forward_train(x).unwrap();
            loss_and_grad(&out, &probe).0
        };
        let mut n = net.clone();
        let (out, tape) = n.forward_train(&x).unwrap();
        let grads = net.backward(&tape, &loss_and_grad(&out, &probe).1).unwrap();
        let h = 1e-5;
        // relative 1e-4, plus an absolute allowance for finite-difference round-off on
        // buffers whose true gradient is 0 (a bias feeding batch norm)
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-7;
        let flat = grads.buffers();
        let count = flat.len();
        for buf in 0..count {
            for i in 0..flat[buf].len() {
                let (mut p, mut m) = (net.clone(), net.clone());
                p.parameters_mut()[buf][i] += h;
                m.parameters_mut()[buf][i] -= h;
                let fd = (eval(&p, &x) - eval(&m, &x)) / (2.0 * h);
                assert!(close(fd, flat[buf][i]), "{order:?} buffer {buf}[{i}]: fd {fd} vs {}", flat[buf][i]);
            }
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (eval(&net, &xp) - eval(&net, &xm)) / (2.0 * h);
            assert!(close(fd, grads.input.data()[i]), "input[{i}]");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_order(LayerOrder::ConvBnRelu);
        check_order(LayerOrder::ConvReluBn);
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let net = network(LayerOrder::ConvBnRelu, 1);
        let g = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert!(matches!(net.backward(&Tape::default(), &g), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = network(LayerOrder::ConvBnRelu, 2);
        let x = Tensor::from_fn(Shape::new(2, 1, 4, 4), |i| (i % 7) as f64 * 0.3);
        let (out, tape) = net.forward_train(&x).unwrap();
        let grads = net.backward(&tape, &Tensor::zeros(out.shape())).unwrap();
        assert!(grads.buffers().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_by_hand() {
        // 1x1 conv with weight w and bias b on a 1x1x2x2 input, loss = mean squared error
        // against target t: dL/dw = 2/4 * sum((w x + b - t) x), dL/db = 2/4 * sum(w x + b - t).
        let spec = ConvSpec::new(1, 1, 1).unwrap();
        let (w, b) = (0.5, 0.25);
        let x = [1.0, 2.0, -1.0, 4.0];
        let t = [0.0, 1.0, 1.0, 2.0];
        let layer = Layer {
            spec,
            params: LayerParams {
                weights: Tensor::from_vec(spec.weight_shape(), vec![w]).unwrap(),
                bias: vec![b],
                bn: None,
            },
            relu: false,
            order: LayerOrder::ConvBnRelu,
        };
        let mut net = Network::new(vec![layer]).unwrap();
        let input = Tensor::from_vec(Shape::new(1, 1, 2, 2), x.to_vec()).unwrap();
        let (out, tape) = net.forward_train(&input).unwrap();
        // residuals: 0.75, 0.25, -1.25, 0.25
        let upstream = Tensor::from_fn(out.shape(), |i| 0.5 * (out.data()[i] - t[i]));
        let g = net.backward(&tape, &upstream).unwrap();
        assert_eq!(g.layers[0].weights, vec![0.5 * (0.75 + 0.5 + 1.25 + 1.0)]);
        assert_eq!(g.layers[0].bias, vec![0.5 * (0.75 + 0.25 - 1.25 + 0.25)]);
        assert_eq!(g.input.data(), &[0.1875, 0.0625, -0.3125, 0.0625]);
    }
}
