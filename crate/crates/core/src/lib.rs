//! Dynamic fixed-point condensation of small convolutional networks.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. It covers the numeric side of the pipeline:
//!
//! - [`fxp`]: fixed-point formats, round-nearest and stochastic quantization.
//! - [`tensor`]: dense arrays, GEMM and im2col lowering.
//! - [`net`]: layer graph, float and quantized forward passes, backward pass,
//!   datapath width analysis.
//! - [`stats`]: range profiling, fractional-length selection, scheme assembly.
//! - [`quantflow`]: per-part bit-width search and the condensation flow.
//! - [`finetune`]: shadow-weight fine-tuning with Adam.
//! - [`train`]: float baseline training.
//! - [`data`]: in-memory datasets, IDX parsing and synthetic data.
//!
//! File formats, the CLI and parallel evaluation live in the `fxpnet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod fxp;
pub mod net;
pub mod optim;
pub mod quantflow;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fxp::{FixedPointFormat, RoundingMode, RoundingRng};
pub use net::{LayerKind, LayerSpec, Model};
pub use stats::{Part, PartSet, QuantScheme, RangeProfile, SchemeMode};
pub use tensor::Tensor;
