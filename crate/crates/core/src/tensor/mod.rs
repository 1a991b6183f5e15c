// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense real linear algebra.

mod approx;
mod matrix;
mod svd;

pub use approx::{
    cosine_similarity, effective_rank, effective_rank_of_spectrum, high_order_approx,
    high_order_from, low_rank_approx, low_rank_from, numerical_rank, spectral_norm,
};
pub use matrix::{dot, norm2, Matrix};
pub use svd::{
    singular_values, svd, SvdFactorization, JACOBI_MAX_DIM, RANK_TOLERANCE, SWEEPS_PER_DIM,
};
