//! Numeric kernels shared by the models, attacks and analysis code.

pub mod blur;
pub mod dense;
pub mod fft;

pub use blur::{blur2d, blur2d_backward, gaussian_kernel, GaussianKernel};
pub use dense::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_backward, softmax,
    softmax_backward, LayerNormCache,
};
pub use fft::fft2_power;
