//! Training and bit-flip-attack engine for small 8-bit quantized networks.
//!
//! The crate is organized around a handful of building blocks:
//!
//! * [`tensor`] — dense f64 arrays plus the matmul kernels everything sits on;
//! * [`model`] — layer stack (dense / conv2d / relu / flatten / dropout) with
//!   shadow full-precision weights and per-layer int8 quantized views,
//!   reverse-mode differentiation, and the fixed MLP / C-CNN builders;
//! * [`quant`] — symmetric per-layer 8-bit weight quantization and the
//!   bit-level view (flips, per-bit loss gradients) the attack works on;
//! * [`train`] — quantization-aware SGD with seeded init/shuffling and
//!   learning-rate schedules;
//! * [`attack`] — progressive bit search: per-layer bit ranking, tentative
//!   flip evaluation, cross-layer selection, and attack traces;
//! * [`data`] — MNIST IDX ingestion (plain or gzipped), attack-set sampling,
//!   and synthetic Gaussian datasets for fast tests;
//! * [`analysis`] — goal statistics, per-layer flip/damage breakdowns,
//!   gradient summaries, and weight histograms;
//! * [`checkpoint`] — bit-exact model persistence with integrity checks.
//!
//! Everything is deterministic given the seeds in the configs: the only
//! randomness source is the counter-based generator in [`rng`].

pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
