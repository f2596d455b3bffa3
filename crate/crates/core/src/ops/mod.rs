//! Differentiable tensor operations: elementwise arithmetic, matrix product,
//! reductions, and 2-D convolution.

mod conv;
mod elementwise;
mod matmul;
mod reduce;

pub use conv::{conv2d, Padding};
pub use elementwise::{
    abs, add, add_scalar, clamp, div, exp, log, max, min, mul, mul_scalar, neg, pow, pow_scalar,
    relu, sqrt, sub,
};
pub use matmul::matmul;
pub use reduce::{mean_all, reduce, sum_all, ReduceKind};
