//! Dense f64 tensors, same-size convolution, batch normalization, ReLU,
//! reverse-mode gradients over a layer chain, and SGD with momentum.

pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod network;
pub mod optim;
pub mod relu;
pub mod tensor;

pub use batchnorm::{batchnorm_forward, BatchNorm, Mode};
pub use conv::{conv2d, conv2d_backward, ConvSpec};
pub use init::he_init;
pub use network::{Gradients, Layer, LayerGrads, LayerOrder, LayerParams, Network, Tape};
pub use optim::{sgd_momentum_step, OptimState};
pub use relu::{relu_backward, relu_forward};
pub use tensor::{Shape, Tensor};
