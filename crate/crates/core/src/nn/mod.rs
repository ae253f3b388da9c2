//! Convolutional network built from scratch in double precision.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod model;
pub mod tensor;

pub use activation::{relu, relu_backward};
pub use adam::{adam_step, AdamState};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm2d, BnGrads, Mode};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads};
pub use loss::mse_loss;
pub use model::{bp_tensor_input, network_forward, Architecture, Layer, Model, Tape};
pub use tensor::Tensor4;
