//! Compression of convolution kernels by CP and tensor-train factorization
//! with a data-free, coarse-to-fine differentiable rank search.

pub mod archive;
pub mod decomposition;
pub mod error;
pub mod metrics;
pub mod report;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{conv2d_dense, frobenius_norm_sq, ConvKernel, DenseTensor, TensorShape};
