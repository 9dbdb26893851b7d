//! Dense tensors and tape-based reverse-mode differentiation, restricted to the
//! primitives a fully-convolutional UNet needs: 2-D convolution, layer
//! normalization, ReLU, 2×2 pooling/upsampling, channel concatenation and
//! spatial averaging.
//!
//! All kernels are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod error;
mod gradcheck;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{NdError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
