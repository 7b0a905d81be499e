//! Forward and backward kernels for the network layers.
//!
//! Kernels operate on plain tensors; [`crate::autodiff::Tape`] records them
//! for differentiation.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod resample;

pub use conv::{conv2d, conv2d_backward, conv2d_with, Conv2dSpec, ConvAlgo, ConvGrads};
pub use dense::{
    linear, linear_backward, relu, relu_backward, softmax, softmax_cross_entropy,
    softmax_cross_entropy_backward,
};
pub use norm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, update_running_stats, BatchNormState,
    BnCache, BN_EPSILON, BN_MOMENTUM,
};
pub use resample::{
    align_spatial, align_spatial_backward, avg_pool2x, avg_pool2x_backward, global_avg_pool,
    global_avg_pool_backward, nearest_upsample2x, nearest_upsample2x_backward, MAX_ALIGN_DELTA,
};
