//! Thin helpers over `faer` used by the kernel, spectral and posterior code.

use faer::linalg::solvers::{Cholesky, SolverCore, SpSolver};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Starting relative jitter, as a fraction of the largest diagonal entry.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of `a + jitter * I` together with the absolute jitter used.
#[derive(Debug)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let b = faer::col::from_slice::<f64>(rhs);
        let x = self.factor.solve(b);
        (0..x.nrows()).map(|i| x.read(i)).collect()
    }

    pub fn solve_mat(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        self.factor.solve(rhs)
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.factor.inverse()
    }

    /// Squared Mahalanobis norm `rᵀ (A + jI)⁻¹ r`.
    pub fn quad_form(&self, r: &[f64]) -> f64 {
        let w = self.solve_vec(r);
        dot(r, &w)
    }
}

pub fn max_diag(a: MatRef<'_, f64>) -> f64 {
    (0..a.nrows()).map(|i| a.read(i, i)).fold(0.0, f64::max)
}

/// Factorizes `a + jitter·I`, starting at `JITTER_START·max(diag)` and escalating by
/// a factor of ten up to `JITTER_MAX·max(diag)`.
pub fn jittered_cholesky(a: MatRef<'_, f64>) -> Result<JitteredCholesky> {
    jittered_cholesky_from(a, JITTER_START)
}

/// Tries an exact factorization first and only then escalates jitter from `JITTER_START`.
pub fn cholesky_or_jitter(a: MatRef<'_, f64>) -> Result<JitteredCholesky> {
    if let Ok(factor) = a.cholesky(Side::Lower) {
        if cholesky_is_finite(&factor) {
            return Ok(JitteredCholesky { factor, jitter: 0.0 });
        }
    }
    jittered_cholesky(a)
}

pub fn jittered_cholesky_from(a: MatRef<'_, f64>, start_rel: f64) -> Result<JitteredCholesky> {
    let scale = max_diag(a).max(f64::MIN_POSITIVE);
    let mut rel = start_rel;
    loop {
        let jitter = rel * scale;
        let shifted = add_diag(a, jitter);
        if let Ok(factor) = shifted.cholesky(Side::Lower) {
            if cholesky_is_finite(&factor) {
                return Ok(JitteredCholesky { factor, jitter });
            }
        }
        if rel >= JITTER_MAX * (1.0 - 1e-12) {
            return Err(Error::IllConditioned {
                condition: condition_estimate(a),
                jitter,
            });
        }
        rel = (rel * 10.0).min(JITTER_MAX);
    }
}

fn cholesky_is_finite(c: &Cholesky<f64>) -> bool {
    let l = c.compute_l();
    (0..l.nrows()).all(|i| l.read(i, i).is_finite() && l.read(i, i) > 0.0)
}

pub fn add_diag(a: MatRef<'_, f64>, value: f64) -> Mat<f64> {
    let mut out = a.to_owned();
    for i in 0..out.nrows() {
        out.write(i, i, out.read(i, i) + value);
    }
    out
}

/// Ratio of extreme eigenvalues; only used for error reporting.
pub fn condition_estimate(a: MatRef<'_, f64>) -> f64 {
    let ev = a.selfadjoint_eigenvalues(Side::Lower);
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Full symmetric eigendecomposition with eigenvalues sorted descending.
pub fn sym_eigen_desc(a: MatRef<'_, f64>) -> (Vec<f64>, Mat<f64>) {
    let evd = a.selfadjoint_eigendecomposition(Side::Lower);
    let n = a.nrows();
    let s = evd.s().column_vector();
    let u = evd.u();
    // faer returns ascending order
    let values: Vec<f64> = (0..n).rev().map(|i| s.read(i)).collect();
    let vectors = Mat::from_fn(n, n, |r, c| u.read(r, n - 1 - c));
    (values, vectors)
}

pub fn symmetrize(a: &mut Mat<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a.read(i, j) + a.read(j, i));
            a.write(i, j, m);
            a.write(j, i, m);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = a · x` for a column-major `a`.
pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.ncols(), x.len());
    debug_assert_eq!(a.nrows(), out.len());
    out.iter_mut().for_each(|v| *v = 0.0);
    for (c, &xc) in x.iter().enumerate() {
        if xc == 0.0 {
            continue;
        }
        let col = a.col(c).try_as_slice().expect("contiguous column");
        for (o, &v) in out.iter_mut().zip(col) {
            *o += v * xc;
        }
    }
}

/// `out = aᵀ · x` for a column-major `a`.
pub fn mat_t_vec(a: MatRef<'_, f64>, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.nrows(), x.len());
    debug_assert_eq!(a.ncols(), out.len());
    for (c, o) in out.iter_mut().enumerate() {
        let col = a.col(c).try_as_slice().expect("contiguous column");
        *o = dot(col, x);
    }
}

pub fn frobenius_sq(a: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for c in 0..a.ncols() {
        for r in 0..a.nrows() {
            s += a.read(r, c).powi(2);
        }
    }
    s
}
