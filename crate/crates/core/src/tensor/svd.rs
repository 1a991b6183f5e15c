// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thin singular value decomposition.
//!
//! Matrices whose smaller dimension exceeds [`JACOBI_MAX_DIM`] go through
//! Householder bidiagonalization followed by implicit Wilkinson-shift QR on
//! the bidiagonal (Golub–Kahan–Reinsch). Smaller ones use one-sided
//! (Hestenes) Jacobi, which is simpler and more accurate at that size.
//!
//! Both paths work on a tall matrix (`rows >= cols`); wide inputs are
//! transposed first and the factors swapped back. The result is then put in
//! canonical form: singular values non-increasing (stable on ties) and the
//! largest-magnitude entry of every left singular vector positive.

use crate::error::{LaserError, Result};
use crate::tensor::matrix::{dot, Matrix};

/// Largest `min(rows, cols)` handled by the Jacobi path.
pub const JACOBI_MAX_DIM: usize = 32;

/// QR sweeps allowed per unit of `min(rows, cols)` before giving up.
pub const SWEEPS_PER_DIM: usize = 100;

/// Relative threshold below which singular values count as zero when
/// reporting numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Thin SVD `w = u · diag(sigma) · vᵀ`, with `u: m×k`, `v: n×k`, `k = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactorization {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactorization {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// Number of singular values above `RANK_TOLERANCE · σ₁`.
    pub fn numerical_rank(&self) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma
            .iter()
            .take_while(|&&s| s > RANK_TOLERANCE * top)
            .count()
    }

    /// `Σ_{i ∈ range} σ_i u_i v_iᵀ`.
    pub fn reconstruct_range(&self, range: std::ops::Range<usize>) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for k in range {
            let s = self.sigma[k];
            if s == 0.0 {
                continue;
            }
            let vk = self.v.column(k);
            for i in 0..m {
                let a = s * self.u[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(i).iter_mut().zip(&vk) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_range(0..self.sigma.len())
    }
}

/// Computes the thin SVD of `w`.
pub fn svd(w: &Matrix) -> Result<SvdFactorization> {
    let (m, n) = w.shape();
    if m >= n {
        let raw = tall_svd(w)?;
        Ok(canonicalize(raw.ut, raw.sigma, raw.vt, m, n))
    } else {
        // wᵀ = U' S V'ᵀ  =>  w = V' S U'ᵀ
        let raw = tall_svd(&w.transpose()).map_err(|err| match err {
            LaserError::NonConvergence { iterations, .. } => LaserError::NonConvergence {
                rows: m,
                cols: n,
                iterations,
            },
            other => other,
        })?;
        Ok(canonicalize(raw.vt, raw.sigma, raw.ut, m, n))
    }
}

/// Singular values only, in non-increasing order.
pub fn singular_values(w: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(w)?.sigma)
}

/// Unsorted factors of a tall matrix, with singular vectors stored as rows.
struct RawSvd {
    /// `n × m`: row `i` is the i-th left singular vector.
    ut: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    /// `n × n`: row `i` is the i-th right singular vector.
    vt: Vec<Vec<f64>>,
}

fn tall_svd(a: &Matrix) -> Result<RawSvd> {
    if a.cols() <= JACOBI_MAX_DIM {
        jacobi_svd(a)
    } else {
        golub_kahan_svd(a)
    }
}

// ---------------------------------------------------------------------------
// Golub–Kahan–Reinsch
// ---------------------------------------------------------------------------

/// Householder reflector `I − 2 v vᵀ / (vᵀv)` mapping `x` onto `alpha·e₁`.
/// Returns `None` when `x` is already zero.
fn householder(x: &[f64]) -> Option<(Vec<f64>, f64, f64)> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let alpha = if x[0] > 0.0 { -norm } else { norm };
    let mut v = x.to_vec();
    v[0] -= alpha;
    let vtv = dot(&v, &v);
    if vtv == 0.0 {
        return None;
    }
    Some((v, 2.0 / vtv, alpha))
}

/// Applies `I − tau v vᵀ` from the left to the block `rows r0.., cols c0..`
/// of a row-major `stride`-wide buffer.
fn reflect_rows(buf: &mut [f64], stride: usize, r0: usize, c0: usize, v: &[f64], tau: f64) {
    let width = stride - c0;
    let mut w = vec![0.0; width];
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &buf[(r0 + i) * stride + c0..(r0 + i + 1) * stride];
        for (acc, &x) in w.iter_mut().zip(row) {
            *acc += vi * x;
        }
    }
    for (i, &vi) in v.iter().enumerate() {
        let f = tau * vi;
        if f == 0.0 {
            continue;
        }
        let row = &mut buf[(r0 + i) * stride + c0..(r0 + i + 1) * stride];
        for (x, &wj) in row.iter_mut().zip(&w) {
            *x -= f * wj;
        }
    }
}

/// Applies `I − tau v vᵀ` from the right to the block `rows r0.., cols c0..`.
fn reflect_cols(buf: &mut [f64], stride: usize, r0: usize, c0: usize, v: &[f64], tau: f64) {
    let rows = buf.len() / stride;
    for r in r0..rows {
        let row = &mut buf[r * stride + c0..r * stride + c0 + v.len()];
        let t = tau * dot(row, v);
        if t == 0.0 {
            continue;
        }
        for (x, &vj) in row.iter_mut().zip(v) {
            *x -= t * vj;
        }
    }
}

#[inline]
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0, a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

/// Replaces rows `i`, `j` with `c·x_i + s·x_j` and `−s·x_i + c·x_j`.
#[inline]
fn rotate_rows(rows: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (ri, rj) = if i < j {
        let (lo, hi) = rows.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = rows.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    };
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a + s * b;
        *y = -s * a + c * b;
    }
}

fn golub_kahan_svd(a: &Matrix) -> Result<RawSvd> {
    let (m, n) = a.shape();
    let mut buf = a.as_slice().to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n.saturating_sub(1)];
    let mut left: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(n);
    let mut right: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(n);

    for k in 0..n {
        let col: Vec<f64> = (k..m).map(|i| buf[i * n + k]).collect();
        match householder(&col) {
            Some((v, tau, alpha)) => {
                reflect_rows(&mut buf, n, k, k, &v, tau);
                d[k] = alpha;
                left.push(Some((v, tau)));
            }
            None => {
                d[k] = 0.0;
                left.push(None);
            }
        }
        if k + 1 < n {
            let row = buf[k * n + k + 1..(k + 1) * n].to_vec();
            match householder(&row) {
                Some((v, tau, alpha)) => {
                    reflect_cols(&mut buf, n, k, k + 1, &v, tau);
                    e[k] = alpha;
                    right.push(Some((v, tau)));
                }
                None => {
                    e[k] = buf[k * n + k + 1];
                    right.push(None);
                }
            }
        }
    }

    // U = H_0 ⋯ H_{n−1} [I; 0]
    let mut u = vec![0.0; m * n];
    for i in 0..n {
        u[i * n + i] = 1.0;
    }
    for k in (0..n).rev() {
        if let Some((v, tau)) = &left[k] {
            reflect_rows(&mut u, n, k, k, v, *tau);
        }
    }
    // V = G_0 ⋯ G_{n−2}; G_k acts on indices k+1..n.
    let mut vmat = vec![0.0; n * n];
    for i in 0..n {
        vmat[i * n + i] = 1.0;
    }
    for k in (0..right.len()).rev() {
        if let Some((v, tau)) = &right[k] {
            reflect_rows(&mut vmat, n, k + 1, k + 1, v, *tau);
        }
    }

    let mut ut: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| u[i * n + j]).collect())
        .collect();
    let mut vt: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| vmat[i * n + j]).collect())
        .collect();

    bidiagonal_qr(&mut d, &mut e, &mut ut, &mut vt, m, n)?;

    for (k, dk) in d.iter_mut().enumerate() {
        if *dk < 0.0 {
            *dk = -*dk;
            vt[k].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(RawSvd { ut, sigma: d, vt })
}

/// Diagonalizes the upper bidiagonal `(d, e)` in place, accumulating left
/// rotations into `ut` and right rotations into `vt`.
fn bidiagonal_qr(
    d: &mut [f64],
    e: &mut [f64],
    ut: &mut [Vec<f64>],
    vt: &mut [Vec<f64>],
    m: usize,
    n: usize,
) -> Result<()> {
    let eps = f64::EPSILON;
    let anorm = (0..n)
        .map(|i| d[i].abs() + e.get(i).map_or(0.0, |x| x.abs()))
        .fold(0.0, f64::max);
    if anorm == 0.0 {
        return Ok(());
    }
    let max_sweeps = SWEEPS_PER_DIM * n;
    let mut sweeps = 0usize;
    let mut hi = n - 1;

    while hi > 0 {
        for i in 0..hi {
            if e[i].abs() <= eps * (d[i].abs() + d[i + 1].abs()) || e[i].abs() <= f64::MIN_POSITIVE
            {
                e[i] = 0.0;
            }
        }
        if e[hi - 1] == 0.0 {
            hi -= 1;
            continue;
        }
        let mut lo = hi - 1;
        while lo > 0 && e[lo - 1] != 0.0 {
            lo -= 1;
        }

        sweeps += 1;
        if sweeps > max_sweeps {
            return Err(LaserError::NonConvergence {
                rows: m,
                cols: n,
                iterations: max_sweeps,
            });
        }

        if let Some(i) = (lo..=hi).find(|&i| d[i].abs() <= eps * anorm) {
            d[i] = 0.0;
            if i < hi {
                // Zero e[i] by rotating row i against rows i+1..=hi.
                let mut f = e[i];
                e[i] = 0.0;
                for j in i + 1..=hi {
                    let (c, s, r) = givens(d[j], f);
                    d[j] = r;
                    if j < hi {
                        f = -s * e[j];
                        e[j] *= c;
                    }
                    rotate_rows(ut, j, i, c, s);
                }
            } else {
                // Zero e[hi-1] by rotating column hi against columns hi-1..=lo.
                let mut f = e[hi - 1];
                e[hi - 1] = 0.0;
                for j in (lo..hi).rev() {
                    let (c, s, r) = givens(d[j], f);
                    d[j] = r;
                    if j > lo {
                        f = -s * e[j - 1];
                        e[j - 1] *= c;
                    }
                    rotate_rows(vt, j, hi, c, s);
                }
            }
            continue;
        }

        // Wilkinson shift from the trailing 2×2 block of BᵀB.
        let dm = d[hi - 1];
        let dn = d[hi];
        let em = e[hi - 1];
        let ep = if hi - 1 > lo { e[hi - 2] } else { 0.0 };
        let t11 = dm * dm + ep * ep;
        let t12 = dm * em;
        let t22 = dn * dn + em * em;
        let delta = 0.5 * (t11 - t22);
        let mu = if t12 == 0.0 {
            t22
        } else {
            let denom = delta + delta.signum() * delta.hypot(t12);
            if denom == 0.0 {
                t22 - t12.abs()
            } else {
                t22 - t12 * t12 / denom
            }
        };

        let mut y = d[lo] * d[lo] - mu;
        let mut z = d[lo] * e[lo];
        for k in lo..hi {
            let (c, s, r) = givens(y, z);
            if k > lo {
                e[k - 1] = r;
            }
            let (dk, ek, dk1) = (d[k], e[k], d[k + 1]);
            d[k] = c * dk + s * ek;
            e[k] = -s * dk + c * ek;
            let bulge = s * dk1;
            d[k + 1] = c * dk1;
            rotate_rows(vt, k, k + 1, c, s);

            let (c, s, r) = givens(d[k], bulge);
            d[k] = r;
            let (ek, dk1) = (e[k], d[k + 1]);
            e[k] = c * ek + s * dk1;
            d[k + 1] = -s * ek + c * dk1;
            if k + 1 < hi {
                let ek1 = e[k + 1];
                z = s * ek1;
                e[k + 1] = c * ek1;
            }
            y = e[k];
            rotate_rows(ut, k, k + 1, c, s);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// One-sided Jacobi
// ---------------------------------------------------------------------------

fn jacobi_svd(a: &Matrix) -> Result<RawSvd> {
    let (m, n) = a.shape();
    let eps = f64::EPSILON;
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vt: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let max_sweeps = SWEEPS_PER_DIM * n;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // [a_p, a_q] ← [c·a_p − s·a_q, s·a_p + c·a_q]
                rotate_rows(&mut cols, p, q, c, -s);
                rotate_rows(&mut vt, p, q, c, -s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LaserError::NonConvergence {
            rows: m,
            cols: n,
            iterations: max_sweeps,
        });
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let ut = cols
        .into_iter()
        .zip(&sigma)
        .map(|(c, &s)| {
            if s > 0.0 {
                c.into_iter().map(|x| x / s).collect()
            } else {
                c
            }
        })
        .collect();
    Ok(RawSvd { ut, sigma, vt })
}

// ---------------------------------------------------------------------------
// Canonical form
// ---------------------------------------------------------------------------

/// Sorts, repairs orthonormality of left vectors belonging to (numerically)
/// zero singular values, fixes signs and assembles the public factorization.
/// `left`/`right` hold singular vectors as rows, of lengths `m` and `n`.
fn canonicalize(
    left: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    right: Vec<Vec<f64>>,
    m: usize,
    n: usize,
) -> SvdFactorization {
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut sigma_sorted: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let mut left_sorted: Vec<Vec<f64>> = order.iter().map(|&i| left[i].clone()).collect();
    let mut right_sorted: Vec<Vec<f64>> = order.iter().map(|&i| right[i].clone()).collect();

    let top = sigma_sorted.first().copied().unwrap_or(0.0);
    let tiny = top * f64::EPSILON * f64::EPSILON;
    // split_at_mut needs the index
    #[allow(clippy::needless_range_loop)]
    for i in 0..k {
        if sigma_sorted[i] <= tiny {
            sigma_sorted[i] = sigma_sorted[i].max(0.0);
            let (done, rest) = left_sorted.split_at_mut(i);
            rest[0] = orthonormal_completion(done, &rest[0], m);
            let (done, rest) = right_sorted.split_at_mut(i);
            rest[0] = orthonormal_completion(done, &rest[0], n);
        }
    }

    for i in 0..k {
        let lead = left_sorted[i]
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |(bi, bv), (j, &x)| {
                if x.abs() > bv {
                    (j, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        if left_sorted[i][lead] < 0.0 {
            left_sorted[i].iter_mut().for_each(|x| *x = -*x);
            right_sorted[i].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = Matrix::from_fn(m, k, |r, c| left_sorted[c][r]);
    let v = Matrix::from_fn(n, k, |r, c| right_sorted[c][r]);
    SvdFactorization {
        u,
        sigma: sigma_sorted,
        v,
    }
}

/// A unit vector orthogonal to every row of `basis`. Keeps `candidate` when it
/// already is one, otherwise tries the standard basis vectors in order.
fn orthonormal_completion(basis: &[Vec<f64>], candidate: &[f64], dim: usize) -> Vec<f64> {
    let project_out = |mut x: Vec<f64>| {
        for _ in 0..2 {
            for b in basis {
                let p = dot(&x, b);
                x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= p * bi);
            }
        }
        x
    };
    let cand_norm = dot(candidate, candidate).sqrt();
    if (cand_norm - 1.0).abs() < 1e-8 {
        let x = project_out(candidate.to_vec());
        let nx = dot(&x, &x).sqrt();
        if nx > 1.0 - 1e-8 {
            return x.into_iter().map(|v| v / nx).collect();
        }
    }
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        let x = project_out(e);
        let nx = dot(&x, &x).sqrt();
        if nx > 0.5 {
            return x.into_iter().map(|v| v / nx).collect();
        }
    }
    unreachable!("fewer than {dim} orthonormal vectors cannot span R^{dim}")
}
