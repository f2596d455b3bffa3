//! Desk-scale training and evaluation laboratory for multi-task speckle-image
//! classification: a classifier regularized by a learned image-enhancement
//! similarity prior and a target-localization scene-context prior.
//!
//! The crate is self-contained: a dense-tensor reverse-mode autodiff core
//! ([`tensor`], [`ops`]), anti-aliased CNN layers ([`nn`]), the loss stack
//! ([`loss`]), the four-network model ([`model`]), a synthetic speckle
//! dataset ([`data`]), the optimization loop ([`train`]) and the metric
//! instruments ([`eval`]).
//!
//! All numeric kernels are generic over the scalar type: training runs in
//! `f32`, the gradient-check suite runs identical graphs in `f64`.

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{finite_diff_check, Tensor};

/// Single-precision tensor, the training currency.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient checks.
pub type Tensor64 = Tensor<f64>;
