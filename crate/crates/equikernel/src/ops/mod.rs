//! Forward/backward numeric kernels: convolution, resampling, pooling,
//! normalization, dense algebra, and pointwise maps.
//!
//! Everything here is a pure function over tensors; the autodiff tape
//! ([`crate::tape`]) wraps these kernels into recorded operations.

pub mod conv;
pub mod dense;
pub mod layout;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, conv2d_backward, ConvSpec};
