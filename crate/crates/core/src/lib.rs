//! Binary weight layers with token-adaptive mixture-of-scales.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: dense double-precision matrices with deterministic products.
//! - [`kernels`]: the packed sign layout, LUT-based binary GEMV, the fused
//!   mixture-of-scales GEMV and a latency harness.
//! - [`binarize`]: static schemes (absolute-mean, dual scaling, partial,
//!   residual).
//! - [`mos`]: the mixture-of-scales layer, router and scale mixing.
//! - [`train`]: a byte-level toy decoder trained by knowledge distillation
//!   with straight-through gradients and AdamW.
//! - [`memmodel`]: analytic deployment-size accounting.
//! - [`corpus`]: byte tokenization, splits and the mixed-corpus sampler.
//! - [`checkpoint`]: manifest + raw payload serialization.

pub mod binarize;
pub mod checkpoint;
pub mod corpus;
mod error;
pub mod kernels;
pub mod memmodel;
pub mod mos;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};
pub use numcore::{Matrix, RngSeed};
