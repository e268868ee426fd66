//! Differentiable primitives. Each op validates its inputs, runs a forward
//! kernel, and records a node whose backward implements the exact chain
//! rule for that kernel.

mod activation;
mod channels;
mod conv;
mod norm;
mod reduce;
mod resample;

pub use activation::{leaky_relu, sigmoid, DEFAULT_LEAKY_SLOPE};
pub use channels::{
    add, concat_channels, concat_tensors, narrow_channels, narrow_tensor, split_channels,
};
pub use conv::{conv1x1x1, conv3d, conv3d_forward, Padding};
pub use norm::{group_norm, DEFAULT_GN_EPSILON, DEFAULT_GROUP_SIZE};
pub use reduce::{sum_all, weighted_sum};
pub use resample::{max_pool2, upsample2};
