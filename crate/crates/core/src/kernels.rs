//! Matérn covariance of general smoothness with its derivative cross-covariances,
//! marginal-likelihood hyperparameter fitting and GP smoothing.
//!
//! For a stationary kernel `k(s, t) = h(s − t)` the blocks are
//!
//! * `K   = h(δ)`
//! * `'K  = ∂k/∂s = h'(δ)`
//! * `K'  = ∂k/∂t = −h'(δ)`
//! * `K'' = ∂²k/∂s∂t = −h''(δ)`
//!
//! With `u = √(2ν)|δ|/ℓ` and `g(u) = σ² 2^{1−ν}/Γ(ν) · uᵛ Kᵥ(u)` the Bessel identities give
//! `g'(u) = −c uᵛ K_{ν−1}(u)` and `g''(u) = c (uᵛ K_{ν−2}(u) − u^{ν−1} K_{ν−1}(u))`, which
//! are valid for every `ν > 2` and need no per-ν special casing.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::adam::{self, AdamConfig, Objective};
use crate::error::{precondition, Error, Result};
use crate::linalg::{self, JitteredCholesky};
use crate::ode::TimeGrid;

pub const DEFAULT_NU: f64 = 2.01;
const AMPLITUDE_FLOOR: f64 = 1e-6;
const NOISE_FLOOR: f64 = 1e-6;
/// Beyond this scaled distance every Bessel term underflows.
const U_CUTOFF: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub amplitude_sq: f64,
    pub lengthscale: f64,
    pub nu: f64,
    pub noise_sd: f64,
}

impl KernelHyperparams {
    pub fn new(amplitude_sq: f64, lengthscale: f64, noise_sd: f64) -> Self {
        Self {
            amplitude_sq,
            lengthscale,
            nu: DEFAULT_NU,
            noise_sd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.amplitude_sq, self.lengthscale, self.nu, self.noise_sd]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.amplitude_sq <= 0.0 || self.lengthscale <= 0.0 || self.nu <= 2.0 || self.noise_sd < 0.0 {
            return Err(precondition(format!("invalid kernel hyperparameters {self:?}")));
        }
        Ok(())
    }

    pub fn matern(&self) -> Matern {
        Matern::new(self.amplitude_sq, self.lengthscale, self.nu)
    }
}

/// Result of hyperparameter fitting for one component, in its JSON shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedHyperparams {
    pub component: usize,
    pub amplitude_sq: f64,
    pub lengthscale: f64,
    pub nu: f64,
    pub noise_sd: f64,
    pub degenerate: bool,
}

impl FittedHyperparams {
    pub fn hyperparams(&self) -> KernelHyperparams {
        KernelHyperparams {
            amplitude_sq: self.amplitude_sq,
            lengthscale: self.lengthscale,
            nu: self.nu,
            noise_sd: self.noise_sd,
        }
    }
}

/// Stationary Matérn kernel of smoothness `nu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matern {
    amplitude_sq: f64,
    lengthscale: f64,
    nu: f64,
    scale: f64,
    norm: f64,
}

/// `h(δ)`, `h'(δ)`, `h''(δ)` at one lag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelDerivs {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Matern {
    pub fn new(amplitude_sq: f64, lengthscale: f64, nu: f64) -> Self {
        let norm = amplitude_sq * 2f64.powf(1.0 - nu) / gamma(nu);
        Self {
            amplitude_sq,
            lengthscale,
            nu,
            scale: (2.0 * nu).sqrt() / lengthscale,
            norm,
        }
    }

    fn scaled(&self, delta: f64) -> f64 {
        self.scale * delta.abs()
    }

    /// `k(δ)`.
    pub fn value(&self, delta: f64) -> f64 {
        let u = self.scaled(delta);
        if u < 1e-12 {
            return self.amplitude_sq;
        }
        if u > U_CUTOFF {
            return 0.0;
        }
        let k_nu = bessel_k(self.nu, u);
        (self.norm * u.powf(self.nu) * k_nu).min(self.amplitude_sq)
    }

    /// Value plus first and second derivatives with respect to the lag `δ = s − t`.
    pub fn derivs(&self, delta: f64) -> KernelDerivs {
        let nu = self.nu;
        let a = self.scale;
        let u = self.scaled(delta);
        if u < 1e-12 {
            return KernelDerivs {
                value: self.amplitude_sq,
                d1: 0.0,
                d2: -a * a * self.amplitude_sq / (2.0 * (nu - 1.0)),
            };
        }
        if u > U_CUTOFF {
            return KernelDerivs {
                value: 0.0,
                d1: 0.0,
                d2: 0.0,
            };
        }
        let k0 = bessel_k(nu, u);
        let k1 = bessel_k(nu - 1.0, u);
        let k2 = bessel_k((nu - 2.0).abs(), u);
        let u_nu = u.powf(nu);
        let g = self.norm * u_nu * k0;
        let g1 = -self.norm * u_nu * k1;
        let g2 = self.norm * (u_nu * k2 - u_nu / u * k1);
        KernelDerivs {
            value: g.min(self.amplitude_sq),
            d1: a * delta.signum() * g1,
            d2: a * a * g2,
        }
    }

    /// `∂k/∂ℓ · ℓ`, the derivative with respect to the log lengthscale.
    pub fn dlog_lengthscale(&self, delta: f64) -> f64 {
        let u = self.scaled(delta);
        if !(1e-12..=U_CUTOFF).contains(&u) {
            return 0.0;
        }
        // ℓ ∂g/∂ℓ = −u g'(u) = c u^{ν+1} K_{ν−1}(u)
        self.norm * u.powf(self.nu + 1.0) * bessel_k(self.nu - 1.0, u)
    }

    pub fn amplitude_sq(&self) -> f64 {
        self.amplitude_sq
    }

    /// `K(a, b)` for arbitrary time vectors.
    pub fn cross_matrix(&self, a: &[f64], b: &[f64]) -> Mat<f64> {
        Mat::from_fn(a.len(), b.len(), |i, j| self.value(a[i] - b[j]))
    }

    /// Symmetric `K(t, t)`, evaluated once per lag when `t` is equally spaced.
    pub fn gram(&self, times: &[f64]) -> Mat<f64> {
        let n = times.len();
        if let Some(h) = uniform_step(times) {
            let lags: Vec<f64> = (0..n).map(|k| self.value(h * k as f64)).collect();
            return Mat::from_fn(n, n, |i, j| lags[i.abs_diff(j)]);
        }
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.value(times[i] - times[j]);
                out.write(i, j, v);
                out.write(j, i, v);
            }
        }
        out
    }
}

fn uniform_step(times: &[f64]) -> Option<f64> {
    if times.len() < 2 {
        return None;
    }
    TimeGrid::from_points(times.to_vec()).ok().map(|g| g.step())
}

/// Modified Bessel function of the second kind, real order `nu ≥ 0`, `x > 0`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    puruspe::besselik(nu, x).1
}

fn gamma(x: f64) -> f64 {
    puruspe::gamma(x)
}

/// Kernel blocks and the conditional derivative law on a grid.
#[derive(Debug)]
pub struct GpConditionals {
    /// `K(I, I)` without jitter.
    pub k: Mat<f64>,
    pub dk_s: Mat<f64>,
    pub dk_t: Mat<f64>,
    pub dk_st: Mat<f64>,
    /// `'K · (K + jitter)⁻¹`.
    pub m: Mat<f64>,
    /// `K'' − 'K (K + jitter)⁻¹ K'`, symmetrized.
    pub c: Mat<f64>,
    pub mean: Vec<f64>,
    /// Absolute jitter added to `K` before factorizing.
    pub jitter: f64,
    pub k_chol: JitteredCholesky,
}

impl GpConditionals {
    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    /// `K + jitter·I`, the covariance actually used downstream.
    pub fn k_jittered(&self) -> Mat<f64> {
        linalg::add_diag(self.k.as_ref(), self.jitter)
    }
}

/// Builds all kernel blocks on `grid`, with a constant prior mean `prior_mean`.
pub fn kernel_block(grid: &TimeGrid, hp: &KernelHyperparams, prior_mean: f64) -> Result<GpConditionals> {
    hp.validate()?;
    let n = grid.len();
    let h = grid.step();
    let kern = hp.matern();
    let lags: Vec<KernelDerivs> = (0..n).map(|k| kern.derivs(h * k as f64)).collect();

    // lag δ = t_i − t_j = (i − j) h
    let k = Mat::from_fn(n, n, |i, j| lags[i.abs_diff(j)].value);
    let dk_s = Mat::from_fn(n, n, |i, j| {
        let d1 = lags[i.abs_diff(j)].d1.abs();
        match i.cmp(&j) {
            std::cmp::Ordering::Greater => -d1,
            std::cmp::Ordering::Less => d1,
            std::cmp::Ordering::Equal => 0.0,
        }
    });
    let dk_t = dk_s.transpose().to_owned();
    let dk_st = Mat::from_fn(n, n, |i, j| -lags[i.abs_diff(j)].d2);

    let k_chol = linalg::jittered_cholesky(k.as_ref())?;
    // m = 'K K⁻¹ = (K⁻¹ K')ᵀ since K is symmetric and 'Kᵀ = K'
    let m = k_chol.solve_mat(dk_t.as_ref()).transpose().to_owned();
    let mut c = &dk_st - &m * &dk_t;
    linalg::symmetrize(&mut c);

    Ok(GpConditionals {
        jitter: k_chol.jitter,
        k,
        dk_s,
        dk_t,
        dk_st,
        m,
        c,
        mean: vec![prior_mean; n],
        k_chol,
    })
}

/// GP smoothing posterior mean and pointwise variance at `targets`.
pub fn gp_smooth_posterior(
    obs_times: &[f64],
    obs_values: &[f64],
    hp: &KernelHyperparams,
    prior_mean: f64,
    targets: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    hp.validate()?;
    if obs_times.len() != obs_values.len() || obs_times.is_empty() {
        return Err(precondition(
            "observation times and values must be non-empty and equal length",
        ));
    }
    if hp.noise_sd == 0.0 && obs_times.windows(2).any(|w| w[0] == w[1]) {
        return Err(precondition(
            "duplicate observation times with zero noise make the covariance singular",
        ));
    }
    let kern = hp.matern();
    let sigma = kern.gram(obs_times);
    let sigma = linalg::add_diag(sigma.as_ref(), hp.noise_sd * hp.noise_sd);
    let chol = linalg::cholesky_or_jitter(sigma.as_ref())?;

    let centered: Vec<f64> = obs_values.iter().map(|y| y - prior_mean).collect();
    let alpha = chol.solve_vec(&centered);
    let cross = kern.cross_matrix(targets, obs_times);
    let solved = chol.solve_mat(cross.transpose());

    let mut mean = vec![0.0; targets.len()];
    linalg::mat_vec(cross.as_ref(), &alpha, &mut mean);
    let var = (0..targets.len())
        .map(|i| {
            let reduction: f64 = (0..obs_times.len()).map(|k| cross.read(i, k) * solved.read(k, i)).sum();
            (kern.amplitude_sq() - reduction).max(0.0)
        })
        .collect();
    mean.iter_mut().for_each(|v| *v += prior_mean);
    Ok((mean, var))
}

/// Options for marginal-likelihood fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub nu: f64,
    /// Fix the observation noise instead of fitting it.
    pub noise_sd: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nu: DEFAULT_NU,
            noise_sd: None,
            adam: AdamConfig {
                learning_rate: 0.05,
                max_iters: 600,
                tol: 1e-10,
                window: 20,
                trace_every: usize::MAX,
                ..AdamConfig::default()
            },
        }
    }
}

/// Negative log marginal likelihood over `(log σ_f², log ℓ, log σ)`.
struct MarginalLikelihood<'a> {
    times: &'a [f64],
    centered: Vec<f64>,
    nu: f64,
    fixed_noise: Option<f64>,
    bounds: [(f64, f64); 3],
}

impl MarginalLikelihood<'_> {
    fn unpack(&self, p: &[f64]) -> (f64, f64, f64) {
        let noise = self.fixed_noise.unwrap_or_else(|| p[2].exp());
        (p[0].exp(), p[1].exp(), noise)
    }

    fn neg_log_lik(&self, p: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        let (amp, ell, noise) = self.unpack(p);
        let kern = Matern::new(amp, ell, self.nu);
        let n = self.times.len();
        let k = kern.gram(self.times);
        let sigma = linalg::add_diag(k.as_ref(), noise * noise);
        let chol = linalg::cholesky_or_jitter(sigma.as_ref())?;
        let alpha = chol.solve_vec(&self.centered);
        let l = chol.factor.compute_l();
        let log_det: f64 = (0..n).map(|i| 2.0 * l.read(i, i).ln()).sum();
        let nll = 0.5 * linalg::dot(&self.centered, &alpha)
            + 0.5 * log_det
            + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        if let Some(g) = grad {
            let sigma_inv = chol.inverse();
            // ∂nll/∂p = −½ tr((ααᵀ − Σ⁻¹) ∂Σ/∂p)
            let w = Mat::from_fn(n, n, |i, j| alpha[i] * alpha[j] - sigma_inv.read(i, j));
            let dl = if let Some(h) = uniform_step(self.times) {
                let lags: Vec<f64> = (0..n).map(|k| kern.dlog_lengthscale(h * k as f64)).collect();
                Mat::from_fn(n, n, |i, j| lags[i.abs_diff(j)])
            } else {
                Mat::from_fn(n, n, |i, j| kern.dlog_lengthscale(self.times[i] - self.times[j]))
            };
            let (mut ga, mut gl, mut gn) = (0.0, 0.0, 0.0);
            for j in 0..n {
                for i in 0..n {
                    let wij = w.read(i, j);
                    ga += wij * k.read(i, j);
                    gl += wij * dl.read(i, j);
                }
                gn += w.read(j, j) * 2.0 * noise * noise;
            }
            g[0] = -0.5 * ga;
            g[1] = -0.5 * gl;
            g[2] = if self.fixed_noise.is_some() { 0.0 } else { -0.5 * gn };
        }
        Ok(nll)
    }
}

impl Objective for MarginalLikelihood<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn value_and_gradient(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.neg_log_lik(params, Some(grad))
    }

    fn project(&self, params: &mut [f64]) {
        for (p, &(lo, hi)) in params.iter_mut().zip(&self.bounds) {
            *p = p.clamp(lo, hi);
        }
    }
}

/// Fits `(σ_f², ℓ, σ)` by multi-start maximization of the Gaussian marginal likelihood
/// of the mean-centred observations, with `ν` held fixed.
///
/// Starts are a fixed grid over lengthscale and noise fractions; ties in the final
/// likelihood are broken by start index, so the result is deterministic.
pub fn fit_hyperparameters(
    component: usize,
    obs_times: &[f64],
    obs_values: &[f64],
    opts: &FitOptions,
) -> Result<FittedHyperparams> {
    let n = obs_times.len();
    if n < 5 || obs_values.len() != n {
        return Err(precondition("hyperparameter fitting needs at least 5 observations"));
    }
    if obs_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(precondition("observation times must be strictly increasing"));
    }
    let span = obs_times[n - 1] - obs_times[0];
    let mean = obs_values.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = obs_values.iter().map(|y| y - mean).collect();
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;

    if var == 0.0 {
        return Ok(FittedHyperparams {
            component,
            amplitude_sq: AMPLITUDE_FLOOR,
            lengthscale: span,
            nu: opts.nu,
            noise_sd: opts.noise_sd.unwrap_or(NOISE_FLOOR),
            degenerate: true,
        });
    }

    let sd = var.sqrt();
    let min_gap = obs_times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let objective = MarginalLikelihood {
        times: obs_times,
        centered,
        nu: opts.nu,
        fixed_noise: opts.noise_sd,
        bounds: [
            ((AMPLITUDE_FLOOR).ln(), (100.0 * var).ln()),
            (min_gap.ln(), (10.0 * span).ln()),
            (NOISE_FLOOR.ln(), sd.ln()),
        ],
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for &ell_frac in &[0.05, 0.1, 0.2, 0.4] {
        for &noise_frac in &[0.1, 0.5] {
            let start = [var.ln(), (ell_frac * span).ln(), (noise_frac * sd).ln()];
            let value_at_end = match adam::minimize(&objective, &start, &opts.adam) {
                Ok(out) => Some((out.objective, out.params)),
                Err(Error::IllConditioned { .. }) | Err(Error::OptimizerDiverged { .. }) => None,
                Err(e) => return Err(e),
            };
            if let Some((f, p)) = value_at_end {
                if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                    best = Some((f, p));
                }
            }
        }
    }
    let (_, p) = best.ok_or_else(|| precondition("marginal likelihood could not be evaluated at any start"))?;
    let (amplitude_sq, lengthscale, noise_sd) = objective.unpack(&p);
    Ok(FittedHyperparams {
        component,
        amplitude_sq,
        lengthscale,
        nu: opts.nu,
        noise_sd,
        degenerate: false,
    })
}
