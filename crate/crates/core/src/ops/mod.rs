//! Forward and backward kernels for every layer primitive in the network.
//!
//! All functions are pure: they read their inputs and return fresh tensors.
//! Dropout takes its random generator explicitly.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod pool;
mod reshape;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, softmax, softmax_backward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, NormForward, NormGrads, NormState, DEFAULT_MOMENTUM,
    DEFAULT_NORM_EPSILON,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvAttrs, ConvGrads};
pub use dense::{dense_backward, dense_forward, DenseGrads};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use pool::{pool2d_backward, pool2d_forward, PoolAttrs, PoolMode};
pub use reshape::{concat, concat_backward, flatten, unflatten};

/// Whether a forward pass is training (batch statistics, live dropout) or
/// inference (moving statistics, identity dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
