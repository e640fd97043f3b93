use rand_distr::{Distribution, Normal};

use super::batchnorm::{BatchNorm, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM};
use super::conv::ConvSpec;
use super::network::LayerParams;
use super::tensor::Tensor;
use crate::rng::rng_from_seed;

/// He initialization: weights ~ N(0, 2 / (in_channels * K^2)), zero bias,
/// and (when `with_bn`) unit scale, zero shift, identity running statistics.
pub fn he_init(spec: &ConvSpec, seed: u64, with_bn: bool) -> LayerParams {
    let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive standard deviation");
    let mut rng = rng_from_seed(seed);
    let weights = Tensor::from_fn(spec.weight_shape(), |_| normal.sample(&mut rng));
    LayerParams {
        weights,
        bias: vec![0.0; spec.out_channels],
        bn: with_bn.then(|| {
            BatchNorm::new(spec.out_channels, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM)
                .expect("default batch-norm constants are valid")
        }),
    }
}
