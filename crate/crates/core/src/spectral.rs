//! Truncated eigenbasis reparametrization of a Gaussian prior and the truncated,
//! real-augmented DFT operator with its covariance push-forward.

use faer::{Mat, MatRef};

use crate::error::{precondition, Result};
use crate::linalg;

/// Relative eigenvalue floor below which modes are discarded.
const EIGEN_FLOOR: f64 = 1e-12;

/// Leading eigenpairs `(V_(j), Λ_(j))` of a covariance matrix.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    vectors: Mat<f64>,
    values: Vec<f64>,
    /// `V_(j) Λ_(j)^{1/2}`, cached for synthesis.
    scaled: Mat<f64>,
    /// Sum of squares of the discarded eigenvalues.
    dropped_sq: f64,
    trace: f64,
}

impl EigenBasis {
    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn j(&self) -> usize {
        self.values.len()
    }

    pub fn vectors(&self) -> MatRef<'_, f64> {
        self.vectors.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `V_(j) Λ_(j)^{1/2}` (n × j).
    pub fn scaled_vectors(&self) -> MatRef<'_, f64> {
        self.scaled.as_ref()
    }

    /// `Σ_{i>j} λᵢ²`, the squared Frobenius error of the truncated reconstruction.
    pub fn dropped_energy_sq(&self) -> f64 {
        self.dropped_sq
    }

    /// Fraction of the trace carried by the retained modes.
    pub fn captured_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.trace
    }

    /// `V_(j) Λ_(j) V_(j)ᵀ`.
    pub fn reconstruct(&self) -> Mat<f64> {
        &self.scaled * self.scaled.transpose()
    }
}

/// Top-`j` eigenpairs of a symmetric PSD matrix, descending, with each eigenvector's
/// largest-magnitude entry made positive (earliest index on ties).
pub fn truncated_eigen(k: MatRef<'_, f64>, j: usize) -> Result<EigenBasis> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(precondition("covariance must be square"));
    }
    if j == 0 || j > n {
        return Err(precondition(format!("truncation j={j} must lie in 1..={n}")));
    }
    let scale = (0..n)
        .flat_map(|c| (0..n).map(move |r| (r, c)))
        .map(|(r, c)| k.read(r, c).abs())
        .fold(1.0, f64::max);
    for c in 0..n {
        for r in (c + 1)..n {
            if (k.read(r, c) - k.read(c, r)).abs() > 1e-10 * scale {
                return Err(precondition(format!("matrix is not symmetric at ({r}, {c})")));
            }
        }
    }

    let (all_values, all_vectors) = linalg::sym_eigen_desc(k);
    let lead = all_values[0];
    let keep = all_values
        .iter()
        .take(j)
        .take_while(|&&v| v > EIGEN_FLOOR * lead && v > 0.0)
        .count()
        .max(usize::from(lead > 0.0));
    if keep == 0 {
        return Err(precondition("covariance has no positive eigenvalue"));
    }

    let mut vectors = Mat::zeros(n, keep);
    for c in 0..keep {
        let mut best = 0;
        for r in 0..n {
            if all_vectors.read(r, c).abs() > all_vectors.read(best, c).abs() {
                best = r;
            }
        }
        let sign = if all_vectors.read(best, c) < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors.write(r, c, sign * all_vectors.read(r, c));
        }
    }
    let values: Vec<f64> = all_values[..keep].to_vec();
    let scaled = Mat::from_fn(n, keep, |r, c| vectors.read(r, c) * values[c].sqrt());
    let dropped_sq = all_values[keep..].iter().map(|v| v * v).sum();
    let trace = all_values.iter().sum();
    Ok(EigenBasis {
        vectors,
        values,
        scaled,
        dropped_sq,
        trace,
    })
}

/// `mean + V_(j) Λ_(j)^{1/2} z`.
pub fn synthesize_trajectory(basis: &EigenBasis, mean: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != basis.j() || mean.len() != basis.n() {
        return Err(precondition(format!(
            "expected {} coefficients and a mean of length {}",
            basis.j(),
            basis.n()
        )));
    }
    let mut out = vec![0.0; basis.n()];
    linalg::mat_vec(basis.scaled_vectors(), z, &mut out);
    for (o, m) in out.iter_mut().zip(mean) {
        *o += m;
    }
    Ok(out)
}

/// `Λ_(j)^{−1/2} V_(j)ᵀ (x − mean)`, the least-squares coefficients of `x`.
pub fn project_to_coefficients(basis: &EigenBasis, mean: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != basis.n() || mean.len() != basis.n() {
        return Err(precondition("state and mean must match the basis size"));
    }
    let centered: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut z = vec![0.0; basis.j()];
    linalg::mat_t_vec(basis.vectors(), &centered, &mut z);
    for (zi, lam) in z.iter_mut().zip(basis.values()) {
        *zi /= lam.sqrt();
    }
    Ok(z)
}

/// Lowest `l` frequencies of the unnormalized DFT split into real and imaginary rows:
/// row 0 is DC, rows `1..l` are `cos(2πfk/n)`, rows `l..2l−1` are `−sin(2πfk/n)`.
#[derive(Debug, Clone)]
pub struct FourierOperator {
    matrix: Mat<f64>,
    l: usize,
}

impl FourierOperator {
    pub fn l(&self) -> usize {
        self.l
    }

    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.matrix.as_ref()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        linalg::mat_vec(self.matrix(), x, &mut out);
        out
    }
}

pub fn build_fourier_operator(n: usize, l: usize) -> Result<FourierOperator> {
    if l == 0 || 2 * l - 1 > n {
        return Err(precondition(format!(
            "fourier truncation l={l} needs 1 <= l and 2l-1 <= n={n}"
        )));
    }
    let rows = 2 * l - 1;
    let matrix = Mat::from_fn(rows, n, |r, k| {
        if r == 0 {
            return 1.0;
        }
        let (f, imag) = if r < l { (r, false) } else { (r - l + 1, true) };
        // reduce f·k mod n first so the angle stays accurate for large grids
        let angle = 2.0 * std::f64::consts::PI * ((f * k) % n) as f64 / n as f64;
        if imag {
            -angle.sin()
        } else {
            angle.cos()
        }
    });
    Ok(FourierOperator { matrix, l })
}

/// `Ã C Ãᵀ`, symmetrized.
pub fn push_covariance(op: &FourierOperator, c: MatRef<'_, f64>) -> Result<Mat<f64>> {
    if c.nrows() != op.n() || c.ncols() != op.n() {
        return Err(precondition("covariance size does not match the operator"));
    }
    let a = op.matrix();
    let mut out = a * (c * a.transpose());
    linalg::symmetrize(&mut out);
    Ok(out)
}
