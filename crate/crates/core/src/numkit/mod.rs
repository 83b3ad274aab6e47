//! Dense numeric kernel: [`Grid2D`], the op set the denoiser needs, manual
//! gradient rules, seeded random streams and finite-difference checking.
//!
//! Matrix products go through `matrixmultiply`'s GEMM; transposed operands are
//! expressed as strides, never materialized.

pub mod backward;
pub mod graph;
mod grid;
mod rng;

pub use graph::{check_against_differences, grad_check, relative_error, Graph, Op};
pub use grid::{
    cosine, gemm, matmul, matmul_nt, matmul_tn, mse, sigmoid, sigmoid_scalar, softmax_rows, Grid2D,
    Trans,
};
pub use rng::{derive_seed, splitmix64, Rng};
