//! The despeckling network.
//!
//! `num_layers` same-size convolutions map a one-channel noisy image
//! straight to the clean estimate. Every layer but the last carries batch
//! normalization; every layer but the first and the last carries a ReLU.
//! The output is left unbounded while training and clamped to `[0, inf)`
//! only when materialized as an image.

mod checkpoint;

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_engine::batchnorm::{DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM};
use crate::nn_engine::{he_init, ConvSpec, Gradients, Layer, LayerOrder, Mode, Network, Shape, Tape, Tensor};
use crate::rng::derive_seed;
use crate::speckle_sim::GrayImage;

pub const DEFAULT_NOISE_FLOOR: f64 = 1e-3;

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    pub layer_order: LayerOrder,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 10,
            hidden_channels: 64,
            kernel: 3,
            layer_order: LayerOrder::ConvBnRelu,
            bn_epsilon: DEFAULT_BN_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

impl ModelConfig {
    /// Small network for desk-scale runs and tests.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            hidden_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::invalid(format!("need at least 2 layers, got {}", self.num_layers)));
        }
        if self.hidden_channels == 0 {
            return Err(Error::invalid("hidden channel count must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::invalid("batch-norm epsilon must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::invalid("batch-norm momentum must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn has_bn(&self, layer: usize) -> bool {
        layer + 1 < self.num_layers
    }

    pub fn has_relu(&self, layer: usize) -> bool {
        layer > 0 && layer + 1 < self.num_layers
    }

    pub fn conv_spec(&self, layer: usize) -> ConvSpec {
        let cin = if layer == 0 { 1 } else { self.hidden_channels };
        let cout = if layer + 1 == self.num_layers { 1 } else { self.hidden_channels };
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    network: Network,
    pub mode: Mode,
}

impl Model {
    /// He-initialized model; layer `i` draws from a sub-stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|i| {
                let spec = config.conv_spec(i);
                let mut params = he_init(&spec, derive_seed(seed, INIT_STREAM, i as u64), config.has_bn(i));
                if let Some(bn) = &mut params.bn {
                    bn.epsilon = config.bn_epsilon;
                    bn.momentum = config.bn_momentum;
                }
                Layer {
                    spec,
                    params,
                    relu: config.has_relu(i),
                    order: config.layer_order,
                }
            })
            .collect();
        Ok(Self {
            config,
            network: Network::new(layers)?,
            mode: Mode::Infer,
        })
    }

    /// Wraps an existing layer stack, checking it against the architecture rule.
    pub fn from_network(config: ModelConfig, network: Network) -> Result<Self> {
        config.validate()?;
        if network.layers.len() != config.num_layers {
            return Err(Error::shape(
                format!("{} layers", config.num_layers),
                format!("{} layers", network.layers.len()),
            ));
        }
        for (i, layer) in network.layers.iter().enumerate() {
            let spec = config.conv_spec(i);
            if layer.spec != spec
                || layer.params.bn.is_some() != config.has_bn(i)
                || layer.relu != config.has_relu(i)
                || layer.order != config.layer_order
            {
                return Err(Error::invalid(format!("layer {i} does not follow the model configuration")));
            }
        }
        Ok(Self {
            config,
            network,
            mode: Mode::Infer,
        })
    }

    /// Two 1x1 layers with unit weights and batch norm frozen to the
    /// identity: infer-mode output equals the input exactly.
    pub fn identity() -> Model {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_channels: 1,
            kernel: 1,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 0).expect("valid identity configuration");
        for layer in &mut model.network.layers {
            layer.params.weights.data_mut()[0] = 1.0;
            layer.params.bias[0] = 0.0;
            if let Some(bn) = &mut layer.params.bn {
                bn.scale[0] = 1.0;
                bn.shift[0] = 0.0;
                bn.running_mean[0] = 0.0;
                bn.running_var[0] = 1.0 - bn.epsilon;
            }
        }
        model
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    /// `(has_bn, has_relu)` for each layer, read from the built layers.
    pub fn layer_flags(&self) -> Vec<(bool, bool)> {
        self.network
            .layers
            .iter()
            .map(|l| (l.params.bn.is_some(), l.relu))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.channels != 1 {
            return Err(Error::shape(
                Shape::new(s.batch, 1, s.height, s.width),
                s,
            ));
        }
        if s.height < self.config.kernel || s.width < self.config.kernel {
            return Err(Error::invalid(format!(
                "input {}x{} is smaller than the {}x{} kernel",
                s.height, s.width, self.config.kernel, self.config.kernel
            )));
        }
        Ok(())
    }

    /// Runs the network in the current [`Model::mode`]. Train mode uses
    /// batch statistics, updates running statistics and returns the tape.
    pub fn forward(&mut self, noisy: &Tensor) -> Result<(Tensor, Option<Tape>)> {
        match self.mode {
            Mode::Train => self.forward_train(noisy).map(|(y, t)| (y, Some(t))),
            Mode::Infer => self.predict(noisy).map(|y| (y, None)),
        }
    }

    pub fn forward_train(&mut self, noisy: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(noisy)?;
        self.network.forward_train(noisy)
    }

    /// Inference with running statistics; a pure function of the parameters.
    pub fn predict(&self, noisy: &Tensor) -> Result<Tensor> {
        self.check_input(noisy)?;
        self.network.forward_infer(noisy)
    }

    pub fn backward(&self, tape: &Tape, upstream: &Tensor) -> Result<Gradients> {
        self.network.backward(tape, upstream)
    }

    /// Infer-mode prediction materialized as an image (negatives clamped).
    pub fn despeckle(&self, noisy: &GrayImage) -> Result<GrayImage> {
        let out = self.predict(&Tensor::from_images([noisy])?)?;
        Ok(out.to_images()?.remove(0))
    }
}

/// Predicted noise `Y / max(X_hat, floor)`.
pub fn predict_noise(noisy: &GrayImage, prediction: &GrayImage, floor: f64) -> Result<GrayImage> {
    noisy.ensure_same_dims(prediction)?;
    if !(floor > 0.0) {
        return Err(Error::invalid(format!("division floor must be positive, got {floor}")));
    }
    let data = noisy
        .data()
        .iter()
        .zip(prediction.data())
        .map(|(y, x)| y / x.max(floor))
        .collect();
    GrayImage::new(noisy.height(), noisy.width(), data)
}
