//! Checkpoint files.
//!
//! ```text
//! KLDNN1\n
//! key=value\n            (configuration and training metadata)
//! ...
//! \n                     (blank line ends the header)
//! <name> <count>\n       (one block per buffer, in declared order)
//! count little-endian f64
//! ...
//! ```
//!
//! Buffers per layer `i`: `layer{i}.weight`, `layer{i}.bias`, and for
//! layers with batch normalization `layer{i}.bn_scale`, `.bn_shift`,
//! `.bn_running_mean`, `.bn_running_var`. Floats in the header use Rust's
//! shortest round-trip formatting, so saving and loading is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn_engine::{BatchNorm, Layer, LayerOrder, LayerParams, Network, Tensor};

pub const CHECKPOINT_MAGIC: &[u8] = b"KLDNN1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub lambda: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

fn layer_buffers(i: usize, layer: &Layer) -> Vec<(String, &[f64])> {
    let mut out = vec![
        (format!("layer{i}.weight"), layer.params.weights.data()),
        (format!("layer{i}.bias"), layer.params.bias.as_slice()),
    ];
    if let Some(bn) = &layer.params.bn {
        out.push((format!("layer{i}.bn_scale"), bn.scale.as_slice()));
        out.push((format!("layer{i}.bn_shift"), bn.shift.as_slice()));
        out.push((format!("layer{i}.bn_running_mean"), bn.running_mean.as_slice()));
        out.push((format!("layer{i}.bn_running_var"), bn.running_var.as_slice()));
    }
    out
}

impl Checkpoint {
    pub fn new(model: Model, meta: TrainingMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let header = [
            ("format_version", CHECKPOINT_VERSION.to_string()),
            ("num_layers", cfg.num_layers.to_string()),
            ("hidden_channels", cfg.hidden_channels.to_string()),
            ("kernel", cfg.kernel.to_string()),
            ("in_channels", "1".to_string()),
            ("out_channels", "1".to_string()),
            ("layer_order", cfg.layer_order.as_str().to_string()),
            ("bn_epsilon", format!("{:?}", cfg.bn_epsilon)),
            ("bn_momentum", format!("{:?}", cfg.bn_momentum)),
            ("epoch", self.meta.epoch.to_string()),
            ("seed", self.meta.seed.to_string()),
            ("lambda", format!("{:?}", self.meta.lambda)),
            ("learning_rate", format!("{:?}", self.meta.learning_rate)),
        ];
        for (k, v) in header {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.push(b'\n');
        for (i, layer) in self.model.network().layers.iter().enumerate() {
            for (name, buf) in layer_buffers(i, layer) {
                out.extend_from_slice(format!("{name} {}\n", buf.len()).as_bytes());
                for v in buf {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader { bytes, pos: 0 };
        reader.magic()?;
        let header = reader.header()?;

        let version: u32 = header.parse("format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                supported: CHECKPOINT_VERSION,
            });
        }
        for key in ["in_channels", "out_channels"] {
            let v: usize = header.parse(key)?;
            if v != 1 {
                return Err(Error::parse("header", format!("{key} must be 1, found {v}")));
            }
        }
        let order_text = header.get("layer_order")?;
        let config = ModelConfig {
            num_layers: header.parse("num_layers")?,
            hidden_channels: header.parse("hidden_channels")?,
            kernel: header.parse("kernel")?,
            layer_order: LayerOrder::parse(order_text)
                .ok_or_else(|| Error::parse("header", format!("unknown layer_order `{order_text}`")))?,
            bn_epsilon: header.parse("bn_epsilon")?,
            bn_momentum: header.parse("bn_momentum")?,
        };
        config
            .validate()
            .map_err(|e| Error::parse("header", e.to_string()))?;
        let meta = TrainingMeta {
            epoch: header.parse("epoch")?,
            seed: header.parse("seed")?,
            lambda: header.parse("lambda")?,
            learning_rate: header.parse("learning_rate")?,
        };

        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let spec = config.conv_spec(i);
            let weights = reader.buffer(&format!("layer{i}.weight"), spec.weight_len())?;
            let bias = reader.buffer(&format!("layer{i}.bias"), spec.out_channels)?;
            let bn = if config.has_bn(i) {
                let c = spec.out_channels;
                Some(BatchNorm {
                    scale: reader.buffer(&format!("layer{i}.bn_scale"), c)?,
                    shift: reader.buffer(&format!("layer{i}.bn_shift"), c)?,
                    running_mean: reader.buffer(&format!("layer{i}.bn_running_mean"), c)?,
                    running_var: reader.buffer(&format!("layer{i}.bn_running_var"), c)?,
                    epsilon: config.bn_epsilon,
                    momentum: config.bn_momentum,
                })
            } else {
                None
            };
            let params = LayerParams {
                weights: Tensor::from_vec(spec.weight_shape(), weights)?,
                bias,
                bn,
            };
            params
                .validate(&spec)
                .map_err(|e| Error::parse(format!("layer{i}"), e.to_string()))?;
            layers.push(Layer {
                spec,
                params,
                relu: config.has_relu(i),
                order: config.layer_order,
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::parse(
                "trailer",
                format!("{} unexpected bytes after the last buffer", bytes.len() - reader.pos),
            ));
        }
        let model = Model::from_network(config, Network::new(layers)?)?;
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and rejects it unless its architecture equals
    /// `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.ensure_config(expected)?;
        Ok(ckpt)
    }

    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        let found = self.model.config();
        let checks: [(&str, String, String); 6] = [
            ("num_layers", found.num_layers.to_string(), expected.num_layers.to_string()),
            ("hidden_channels", found.hidden_channels.to_string(), expected.hidden_channels.to_string()),
            ("kernel", found.kernel.to_string(), expected.kernel.to_string()),
            ("layer_order", found.layer_order.as_str().into(), expected.layer_order.as_str().into()),
            ("bn_epsilon", format!("{:?}", found.bn_epsilon), format!("{:?}", expected.bn_epsilon)),
            ("bn_momentum", format!("{:?}", found.bn_momentum), format!("{:?}", expected.bn_momentum)),
        ];
        for (key, f, r) in checks {
            if f != r {
                return Err(Error::ConfigMismatch {
                    key: key.into(),
                    found: f,
                    requested: r,
                });
            }
        }
        Ok(())
    }
}

struct Header(BTreeMap<String, String>);

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::parse("header", format!("missing key `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::parse("header", format!("bad value `{raw}` for `{key}`")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn magic(&mut self) -> Result<()> {
        if self.bytes.starts_with(CHECKPOINT_MAGIC) {
            self.pos = CHECKPOINT_MAGIC.len();
            return Ok(());
        }
        // same family, different revision
        if self.bytes.len() > 6 && self.bytes.starts_with(b"KLDNN") {
            let end = self.bytes.iter().position(|&b| b == b'\n').unwrap_or(self.bytes.len()).min(16);
            return Err(Error::Version {
                found: String::from_utf8_lossy(&self.bytes[5..end]).into_owned(),
                supported: CHECKPOINT_VERSION,
            });
        }
        Err(Error::parse("magic", "not a KLDNN checkpoint"))
    }

    fn line(&mut self, section: &str) -> Result<&str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(section, "unexpected end of file"))?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| Error::parse(section, "line is not valid UTF-8"))
    }

    fn header(&mut self) -> Result<Header> {
        let mut map = BTreeMap::new();
        loop {
            let line = self.line("header")?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("header", format!("expected key=value, got `{line}`")))?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::parse("header", format!("duplicate key `{k}`")));
            }
        }
        Ok(Header(map))
    }

    fn buffer(&mut self, name: &str, expected_len: usize) -> Result<Vec<f64>> {
        let line = self.line(name)?.to_string();
        let (found_name, count) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(name, format!("bad buffer header `{line}`")))?;
        if found_name != name {
            return Err(Error::parse(name, format!("expected buffer `{name}`, found `{found_name}`")));
        }
        let count: usize = count
            .parse()
            .map_err(|_| Error::parse(name, format!("bad element count `{count}`")))?;
        if count != expected_len {
            return Err(Error::parse(name, format!("expected {expected_len} elements, header says {count}")));
        }
        let nbytes = count * 8;
        let rest = &self.bytes[self.pos..];
        if rest.len() < nbytes {
            return Err(Error::parse(
                name,
                format!("truncated: need {nbytes} bytes, {} remain", rest.len()),
            ));
        }
        let values: Vec<f64> = rest[..nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(name, "non-finite value"));
        }
        self.pos += nbytes;
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_model(seed: u64) -> Model {
        let mut model = Model::new(ModelConfig::toy(), seed).unwrap();
        let mut rng = rng_from_seed(seed + 100);
        for layer in &mut model.network_mut().layers {
            layer.params.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            if let Some(bn) = &mut layer.params.bn {
                for buf in [&mut bn.scale, &mut bn.shift, &mut bn.running_mean] {
                    buf.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
                }
                bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.0..3.0));
            }
        }
        model
    }

    fn meta() -> TrainingMeta {
        TrainingMeta {
            epoch: 7,
            seed: 42,
            lambda: 0.1 + 0.2,
            learning_rate: 2e-6,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = Checkpoint::new(random_model(1), meta());
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta.lambda.to_bits(), (0.1f64 + 0.2).to_bits());
        let a = ckpt.model.network().parameters();
        let b = back.model.network().parameters();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_names_the_section() {
        let bytes = Checkpoint::new(random_model(2), meta()).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        match err {
            Error::Parse { section, .. } => assert_eq!(section, "layer3.bias"),
            other => panic!("unexpected {other:?}"),
        }
        for cut in (0..bytes.len()).step_by(13) {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn version_and_magic_checks() {
        let bytes = Checkpoint::new(random_model(3), meta()).to_bytes();
        let mut v2 = bytes.clone();
        v2[5] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { .. })));
        let key = b"format_version=1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let mut bumped = bytes.clone();
        bumped[at + key.len() - 1] = b'9';
        assert!(matches!(Checkpoint::from_bytes(&bumped), Err(Error::Version { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"PK\x03\x04"), Err(Error::Parse { .. })));
    }

    #[test]
    fn kernel_mismatch_is_rejected() {
        let ckpt = Checkpoint::new(random_model(4), meta());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kldnn");
        ckpt.save(&path).unwrap();
        let want = ModelConfig {
            kernel: 5,
            ..ModelConfig::toy()
        };
        assert!(matches!(
            Checkpoint::load_expecting(&path, &want),
            Err(Error::ConfigMismatch { ref key, .. }) if key == "kernel"
        ));
        assert!(Checkpoint::load_expecting(&path, &ModelConfig::toy()).is_ok());
    }
}
