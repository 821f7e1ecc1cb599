//! Perron-Frobenius analysis of offspring mean matrices.
//!
//! The branching chain's tail family has offspring mean matrix
//! `M_{ij} = rho_j + [j == i-1]`. Because the tail has zero drift,
//! `sum_l l * rho_l = 1`, which forces Perron root exactly 1 (criticality)
//! with right eigenvector proportional to `(1, 2, ..., L)`. This module
//! computes the Perron pair by power iteration (left vector via the
//! transpose), the modulus of the subdominant eigenvalue from a full
//! eigendecomposition, the characteristic polynomial cross-check against an
//! LU determinant, and the quadratic functionals `beta` and
//! `theta = <emigrants, u> / beta` that govern survival asymptotics.

use crate::env::CookieEnvironment;
use nalgebra::DMatrix;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("matrix must be square and nonempty")]
    NotSquare,
    #[error("matrix entry ({i},{j}) is negative or non-finite")]
    BadEntry { i: usize, j: usize },
    #[error("matrix is not positively regular (some power within the Wielandt bound must be strictly positive)")]
    NotPositivelyRegular,
    #[error("power iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: u64 },
}

fn check_matrix(mat: &[Vec<f64>]) -> Result<usize, SpectralError> {
    let n = mat.len();
    if n == 0 || mat.iter().any(|r| r.len() != n) {
        return Err(SpectralError::NotSquare);
    }
    for (i, row) in mat.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if !x.is_finite() || x < 0.0 {
                return Err(SpectralError::BadEntry { i, j });
            }
        }
    }
    Ok(n)
}

/// Positive regularity via boolean reachability: some power up to the
/// Wielandt bound `(n-1)^2 + 1` has all entries positive.
pub fn positively_regular(mat: &[Vec<f64>]) -> Result<bool, SpectralError> {
    let n = check_matrix(mat)?;
    let bound = (n - 1) * (n - 1) + 1;
    let base: Vec<Vec<bool>> =
        mat.iter().map(|r| r.iter().map(|&x| x > 0.0).collect()).collect();
    let mut power = base.clone();
    for _ in 1..=bound {
        if power.iter().all(|r| r.iter().all(|&b| b)) {
            return Ok(true);
        }
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for k in 0..n {
                if power[i][k] {
                    for j in 0..n {
                        next[i][j] |= base[k][j];
                    }
                }
            }
        }
        power = next;
    }
    Ok(power.iter().all(|r| r.iter().all(|&b| b)))
}

#[derive(Clone, Debug, Serialize)]
pub struct PerronPair {
    pub lambda: f64,
    /// Right eigenvector, entries positive, normalized to sum 1.
    pub right: Vec<f64>,
    /// Left eigenvector, entries positive, scaled so `<right, left> = 1`.
    pub left: Vec<f64>,
    /// Modulus of the subdominant eigenvalue (0 for 1x1 matrices).
    pub second_modulus: f64,
    /// Perron root recomputed by the dense eigensolver, as a cross-check on
    /// the power iteration.
    pub lambda_via_eigen: f64,
    pub iterations: u64,
}

fn power_iterate(
    mat: &DMatrix<f64>,
    tol: f64,
    max_iter: u64,
) -> Result<(f64, Vec<f64>, u64), SpectralError> {
    let n = mat.nrows();
    let mut x = vec![1.0 / n as f64; n];
    let mut lambda = 0.0;
    for it in 1..=max_iter {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += mat[(i, j)] * x[j];
            }
            y[i] = acc;
        }
        let norm: f64 = y.iter().sum();
        for v in &mut y {
            *v /= norm;
        }
        let delta = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        let lam_delta = (norm - lambda).abs();
        lambda = norm;
        x = y;
        if delta < tol && lam_delta < tol && it > 1 {
            return Ok((lambda, x, it));
        }
    }
    Err(SpectralError::NoConvergence { iterations: max_iter })
}

/// Perron root and both eigenvectors of a positively regular matrix.
/// Power iteration with tolerance `tol` (1e-12 is the working default).
pub fn perron_pair(mat: &[Vec<f64>], tol: f64, max_iter: u64) -> Result<PerronPair, SpectralError> {
    let n = check_matrix(mat)?;
    if !positively_regular(mat)? {
        return Err(SpectralError::NotPositivelyRegular);
    }
    let flat: Vec<f64> = mat.iter().flatten().copied().collect();
    let a = DMatrix::from_row_slice(n, n, &flat);
    let (lambda, right, it_r) = power_iterate(&a, tol, max_iter)?;
    let (_, mut left, it_l) = power_iterate(&a.transpose(), tol, max_iter)?;
    let dot: f64 = right.iter().zip(&left).map(|(u, v)| u * v).sum();
    for v in &mut left {
        *v /= dot;
    }
    let eigen = a.complex_eigenvalues();
    let mut moduli: Vec<f64> = eigen.iter().map(|c| c.norm()).collect();
    moduli.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    Ok(PerronPair {
        lambda,
        right,
        left,
        second_modulus: moduli.get(1).copied().unwrap_or(0.0),
        lambda_via_eigen: moduli[0],
        iterations: it_r.max(it_l),
    })
}

/// Offspring mean matrix of the tail family: `M_{ij} = rho_j + [j == i-1]`.
pub fn tail_family_mean_matrix(rho: &[f64]) -> Vec<Vec<f64>> {
    let l = rho.len();
    (1..=l)
        .map(|i| (1..=l).map(|j| rho[j - 1] + f64::from(u8::from(j + 1 == i))).collect())
        .collect()
}

/// Second factorial moments `sigma_{ij}(k) = E[X_i X_j - delta_{ij} X_j]`
/// for a type-`k` parent of the tail family, in closed form:
/// `2 rho_i rho_j + delta_{k-1,i} rho_j + delta_{k-1,j} rho_i`.
pub fn tail_family_sigma(rho: &[f64]) -> SigmaTensor {
    let l = rho.len();
    let mut t = SigmaTensor::zeros(l);
    for k in 1..=l {
        for i in 1..=l {
            for j in 1..=l {
                let mut v = 2.0 * rho[i - 1] * rho[j - 1];
                if k >= 2 && i == k - 1 {
                    v += rho[j - 1];
                }
                if k >= 2 && j == k - 1 {
                    v += rho[i - 1];
                }
                t.set(k, i, j, v);
            }
        }
    }
    t
}

/// Symmetric-in-(i,j) tensor of second factorial moments per parent type.
#[derive(Clone, Debug, Serialize)]
pub struct SigmaTensor {
    l: usize,
    vals: Vec<f64>,
}

impl SigmaTensor {
    pub fn zeros(l: usize) -> SigmaTensor {
        SigmaTensor { l, vals: vec![0.0; l * l * l] }
    }

    pub fn types(&self) -> usize {
        self.l
    }

    /// `sigma_{ij}(k)`, all indices 1-based.
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.vals[(k - 1) * self.l * self.l + (i - 1) * self.l + (j - 1)]
    }

    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        self.vals[(k - 1) * self.l * self.l + (i - 1) * self.l + (j - 1)] = v;
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BetaTheta {
    /// `beta = (1/2) sum_k left_k sum_{ij} sigma_{ij}(k) right_i right_j`.
    pub beta: f64,
    /// `theta = <emigrants, right> / beta`.
    pub theta: f64,
}

pub fn beta_theta(
    sigma: &SigmaTensor,
    right: &[f64],
    left: &[f64],
    emigrants: &[f64],
) -> BetaTheta {
    let l = sigma.types();
    let mut beta = 0.0;
    for k in 1..=l {
        let mut q = 0.0;
        for i in 1..=l {
            for j in 1..=l {
                q += sigma.get(k, i, j) * right[i - 1] * right[j - 1];
            }
        }
        beta += 0.5 * left[k - 1] * q;
    }
    let load: f64 = emigrants.iter().zip(right).map(|(n, u)| n * u).sum();
    BetaTheta { beta, theta: load / beta }
}

/// Closed-form characteristic polynomial of the tail family matrix against
/// an LU determinant on a grid of evaluation points.
#[derive(Clone, Debug, Serialize)]
pub struct CharPolyReport {
    pub l: usize,
    /// Coefficients `c_j` of `phi(x) = (-1)^L (x^L - sum_j c_j x^j)`.
    pub coefficients: Vec<f64>,
    /// Largest absolute difference between `phi` and `det(M - x I)` on the
    /// evaluation grid.
    pub max_abs_diff: f64,
    /// `phi(1)`, computed in exact rational arithmetic (must be exactly 0).
    pub phi_at_1: f64,
    /// Eigenvalues of the mean matrix (real, imaginary).
    pub roots: Vec<(f64, f64)>,
    pub max_root_modulus: f64,
    /// Distance from the nearest root to 1.
    pub unit_root_gap: f64,
}

pub fn char_poly_check(env: &CookieEnvironment) -> CharPolyReport {
    let rho_exact = env.rho();
    let l = rho_exact.len();
    // c_j = sum_{l = L-j}^{L} rho_l, exact, then rounded once.
    let coeff_exact: Vec<BigRational> = (0..l)
        .map(|j| rho_exact[l - j - 1..].iter().fold(BigRational::zero(), |a, b| a + b))
        .collect();
    let coefficients: Vec<f64> =
        coeff_exact.iter().map(|c| c.to_f64().expect("coefficient fits f64")).collect();
    let phi_at_1_exact =
        coeff_exact.iter().fold(BigRational::from_integer(1.into()), |a, b| a - b);
    let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
    let phi = |x: f64| {
        let mut s = x.powi(l as i32);
        for (j, c) in coefficients.iter().enumerate() {
            s -= c * x.powi(j as i32);
        }
        sign * s
    };
    let rho_f = env.rho_f64();
    let mat = tail_family_mean_matrix(&rho_f);
    let flat: Vec<f64> = mat.iter().flatten().copied().collect();
    let a = DMatrix::from_row_slice(l, l, &flat);
    let mut max_abs_diff = 0.0f64;
    for step in 0..=48 {
        let x = -1.2 + 2.4 * step as f64 / 48.0;
        let shifted = &a - DMatrix::identity(l, l) * x;
        let det = shifted.determinant();
        max_abs_diff = max_abs_diff.max((det - phi(x)).abs());
    }
    let eigen = a.complex_eigenvalues();
    let roots: Vec<(f64, f64)> = eigen.iter().map(|c| (c.re, c.im)).collect();
    let max_root_modulus =
        eigen.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    let unit_root_gap = eigen
        .iter()
        .map(|c| ((c.re - 1.0) * (c.re - 1.0) + c.im * c.im).sqrt())
        .fold(f64::INFINITY, f64::min);
    CharPolyReport {
        l,
        coefficients,
        max_abs_diff,
        phi_at_1: phi_at_1_exact.to_f64().expect("fits"),
        roots,
        max_root_modulus,
        unit_root_gap,
    }
}
