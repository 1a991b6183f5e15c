// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-selective rank reduction for decoder-only transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense matrices, SVD, low-rank and higher-order approximations.
//! - [`transformer`]: a small decoder-only inference engine whose weights are
//!   addressed by `(matrix type, layer)`.
//! - [`container`]: the LTC tensor container used for checkpoints.
//! - [`laser`]: interventions, plans and the single-step / greedy searches.
//! - [`eval`]: dataset ingestion, prompt templates, splits and metrics.
//! - [`analysis`]: flip sets, frequency binning, higher-order studies, sweeps.

pub mod analysis;
pub mod container;
pub mod error;
pub mod eval;
pub mod laser;
pub mod parallel;
pub mod tensor;
pub mod transformer;

pub use error::{LaserError, Result};
pub use tensor::{Matrix, SvdFactorization};
