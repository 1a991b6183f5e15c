// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank and complementary ("higher-order") approximations, plus the
//! spectral summaries built on top of the SVD.

use crate::error::{LaserError, Result};
use crate::tensor::matrix::{dot, norm2, Matrix};
use crate::tensor::svd::{svd, SvdFactorization, RANK_TOLERANCE};

fn check_rank(w: &Matrix, r: usize) -> Result<()> {
    if r > w.min_dim() {
        return Err(LaserError::invalid(format!(
            "rank {r} out of range for {}x{} matrix (max {})",
            w.rows(),
            w.cols(),
            w.min_dim()
        )));
    }
    Ok(())
}

/// Best rank-`r` approximation `Σ_{i<r} σ_i u_i v_iᵀ`.
pub fn low_rank_approx(w: &Matrix, r: usize) -> Result<Matrix> {
    check_rank(w, r)?;
    if r == 0 {
        return Ok(Matrix::zeros(w.rows(), w.cols()));
    }
    Ok(svd(w)?.reconstruct_range(0..r))
}

/// The part of `w` carried by all but the `r` largest singular values.
pub fn high_order_approx(w: &Matrix, r: usize) -> Result<Matrix> {
    check_rank(w, r)?;
    if r == w.min_dim() {
        return Ok(Matrix::zeros(w.rows(), w.cols()));
    }
    let f = svd(w)?;
    Ok(f.reconstruct_range(r..f.sigma.len()))
}

/// Same as [`low_rank_approx`] for an already factorized matrix.
pub fn low_rank_from(f: &SvdFactorization, r: usize) -> Result<Matrix> {
    if r > f.sigma.len() {
        return Err(LaserError::invalid(format!(
            "rank {r} exceeds factorization rank {}",
            f.sigma.len()
        )));
    }
    Ok(f.reconstruct_range(0..r))
}

/// Same as [`high_order_approx`] for an already factorized matrix.
pub fn high_order_from(f: &SvdFactorization, r: usize) -> Result<Matrix> {
    if r > f.sigma.len() {
        return Err(LaserError::invalid(format!(
            "rank {r} exceeds factorization rank {}",
            f.sigma.len()
        )));
    }
    Ok(f.reconstruct_range(r..f.sigma.len()))
}

/// `σ₁(w)`.
pub fn spectral_norm(w: &Matrix) -> Result<f64> {
    Ok(svd(w)?.sigma[0])
}

/// Count of singular values above `1e-10 · σ₁`.
pub fn numerical_rank(w: &Matrix) -> Result<usize> {
    Ok(svd(w)?.numerical_rank())
}

/// Entropy-based effective rank: `exp(−Σ p_i ln p_i)` with `p_i = σ_i / Σσ`.
pub fn effective_rank(w: &Matrix) -> Result<f64> {
    let sigma = svd(w)?.sigma;
    effective_rank_of_spectrum(&sigma)
        .ok_or_else(|| LaserError::invalid("effective rank of an all-zero matrix is undefined"))
}

/// Effective rank of a non-increasing spectrum; `None` when it is all zero.
/// Values below the numerical rank threshold are dropped.
pub fn effective_rank_of_spectrum(sigma: &[f64]) -> Option<f64> {
    let top = sigma.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return None;
    }
    let kept: Vec<f64> = sigma
        .iter()
        .copied()
        .filter(|&s| s > RANK_TOLERANCE * top)
        .collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Some(entropy.exp())
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LaserError::invalid(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LaserError::invalid("cosine similarity with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
