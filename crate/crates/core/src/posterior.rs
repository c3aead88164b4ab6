//! Negative log-posterior and analytic gradient for the Eigen-Fourier objective and the
//! time-domain MAGI baseline.
//!
//! Both objectives share one shape per component `d`:
//!
//! ```text
//! ½ [ zᵀz + ‖A f_d(x) − B_d z‖²_{S_d⁻¹} + Σ_τ (x_d − y_d)² / σ_d² ],   x_d = μ_d + Φ_d z
//! ```
//!
//! EFiGP uses `Φ = V Λ^{1/2}`, `A = Ã`, `B = Ã m Φ`, `S = Ã C Ãᵀ`. MAGI optimizes in
//! whitened coordinates `x = μ + L u` with `L Lᵀ = K`, identity `A`, `B = m L`, `S = C`.

use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::adam::Objective;
use crate::error::{precondition, Error, Result};
use crate::kernels::{self, KernelHyperparams};
use crate::linalg::{self, JitteredCholesky};
use crate::observations::ObservationSet;
use crate::ode::{OdeSystem, TimeGrid};
use crate::spectral::{self, EigenBasis, FourierOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Efigp { eigen: usize, fourier: usize },
    Magi,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Efigp { .. } => "efigp",
            Method::Magi => "magi",
        }
    }
}

#[derive(Debug)]
pub struct ComponentPrecomp {
    /// `Φ_d`, n × j.
    pub synth: Mat<f64>,
    /// `B_d`, rows × j.
    pub b: Mat<f64>,
    /// Factor of the physics covariance `S_d`.
    pub physics_chol: JitteredCholesky,
    pub basis: Option<EigenBasis>,
    pub prior_mean: Vec<f64>,
    pub obs_values: Vec<f64>,
    pub noise_sd: f64,
    pub hyperparams: KernelHyperparams,
    /// Absolute jitter added to `C` before pushing it forward.
    pub c_jitter: f64,
    magi: Option<MagiExtra>,
}

#[derive(Debug)]
struct MagiExtra {
    k_chol: JitteredCholesky,
    m: Mat<f64>,
}

/// Everything about a posterior that does not depend on the optimization state.
pub struct PosteriorPrecomp {
    system: Arc<dyn OdeSystem>,
    grid: TimeGrid,
    method: Method,
    fourier: Option<FourierOperator>,
    obs_index: Vec<usize>,
    components: Vec<ComponentPrecomp>,
}

/// Optimization variables: coefficients per component and the ODE parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub z: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

impl PosteriorState {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.z.iter().flatten().copied().collect();
        out.extend_from_slice(&self.theta);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub component: usize,
    pub prior_term: f64,
    pub physics_term: f64,
    pub data_term: f64,
    pub total: f64,
}

/// Gradient split the same way as [`PosteriorState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradient {
    pub dz: Vec<Vec<f64>>,
    pub dtheta: Vec<f64>,
}

impl PosteriorPrecomp {
    /// Assembles the per-component matrices for `method` on `grid`.
    ///
    /// The prior mean of each component is the sample mean of its observations and the
    /// noise level is the frozen `noise_sd` of its hyperparameters.
    pub fn new(
        system: Arc<dyn OdeSystem>,
        grid: &TimeGrid,
        hps: &[KernelHyperparams],
        obs: &ObservationSet,
        method: Method,
    ) -> Result<Self> {
        let dim = system.dim();
        if obs.dim() != dim || hps.len() != dim {
            return Err(precondition(format!(
                "{} has {dim} components but got {} observation rows and {} hyperparameter sets",
                system.name(),
                obs.dim(),
                hps.len()
            )));
        }
        let n = grid.len();
        let obs_index = obs.indices_in(grid)?;
        let fourier = match method {
            Method::Efigp { eigen, fourier } => {
                if eigen == 0 || eigen > n {
                    return Err(precondition(format!("eigen truncation {eigen} must lie in 1..={n}")));
                }
                Some(spectral::build_fourier_operator(n, fourier)?)
            }
            Method::Magi => None,
        };

        let mut components = Vec::with_capacity(dim);
        for (d, hp) in hps.iter().enumerate() {
            let cond = kernels::kernel_block(grid, hp, obs.sample_mean(d))?;
            let c_chol = linalg::jittered_cholesky(cond.c.as_ref())?;
            let c_jitter = c_chol.jitter;
            let (synth, b, physics_chol, basis, magi) = match (&method, &fourier) {
                (Method::Efigp { eigen, .. }, Some(op)) => {
                    let basis = spectral::truncated_eigen(cond.k_jittered().as_ref(), *eigen)?;
                    let synth = basis.scaled_vectors().to_owned();
                    let b = op.matrix() * (&cond.m * &synth);
                    let c_j = linalg::add_diag(cond.c.as_ref(), c_jitter);
                    let cf = spectral::push_covariance(op, c_j.as_ref())?;
                    let cf_chol = linalg::cholesky_or_jitter(cf.as_ref())?;
                    (synth, b, cf_chol, Some(basis), None)
                }
                _ => {
                    let l = cond.k_chol.factor.compute_l();
                    let b = &cond.m * &l;
                    let extra = MagiExtra {
                        k_chol: cond.k_chol,
                        m: cond.m,
                    };
                    (l, b, c_chol, None, Some(extra))
                }
            };
            components.push(ComponentPrecomp {
                synth,
                b,
                physics_chol,
                basis,
                prior_mean: cond.mean,
                obs_values: obs.values[d].clone(),
                noise_sd: hp.noise_sd,
                hyperparams: *hp,
                c_jitter,
                magi,
            });
        }

        Ok(Self {
            system,
            grid: grid.clone(),
            method,
            fourier,
            obs_index,
            components,
        })
    }

    pub fn system(&self) -> &Arc<dyn OdeSystem> {
        &self.system
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn fourier(&self) -> Option<&FourierOperator> {
        self.fourier.as_ref()
    }

    pub fn components(&self) -> &[ComponentPrecomp] {
        &self.components
    }

    pub fn obs_index(&self) -> &[usize] {
        &self.obs_index
    }

    /// Coefficients per component (j for EFiGP, n for MAGI).
    pub fn coeff_len(&self) -> usize {
        self.components[0].synth.ncols()
    }

    pub fn state_len(&self) -> usize {
        self.components.len() * self.coeff_len() + self.system.param_count()
    }

    fn check_state(&self, state: &PosteriorState) -> Result<()> {
        let j = self.coeff_len();
        if state.z.len() != self.components.len()
            || state.z.iter().any(|z| z.len() != j)
            || state.theta.len() != self.system.param_count()
        {
            return Err(precondition(format!(
                "state must hold {} coefficient vectors of length {j} and {} parameters",
                self.components.len(),
                self.system.param_count()
            )));
        }
        Ok(())
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<PosteriorState> {
        if flat.len() != self.state_len() {
            return Err(precondition(format!(
                "expected {} state entries, got {}",
                self.state_len(),
                flat.len()
            )));
        }
        let j = self.coeff_len();
        let dim = self.components.len();
        Ok(PosteriorState {
            z: (0..dim).map(|d| flat[d * j..(d + 1) * j].to_vec()).collect(),
            theta: flat[dim * j..].to_vec(),
        })
    }

    /// `x_d(I) = μ_d + Φ_d z_d` for every component.
    pub fn trajectory(&self, state: &PosteriorState) -> Result<Vec<Vec<f64>>> {
        self.check_state(state)?;
        Ok(self.synthesize(&state.z))
    }

    fn synthesize(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.grid.len();
        self.components
            .iter()
            .zip(z)
            .map(|(c, zd)| {
                let mut x = vec![0.0; n];
                linalg::mat_vec(c.synth.as_ref(), zd, &mut x);
                for (xi, m) in x.iter_mut().zip(&c.prior_mean) {
                    *xi += m;
                }
                x
            })
            .collect()
    }

    /// Coefficients whose synthesis best reproduces `xs` (exactly for MAGI).
    pub fn coefficients_for(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.len() != self.components.len() || xs.iter().any(|x| x.len() != self.grid.len()) {
            return Err(precondition("trajectory shape does not match the grid"));
        }
        self.components
            .iter()
            .zip(xs)
            .map(|(c, x)| match &c.basis {
                Some(basis) => spectral::project_to_coefficients(basis, &c.prior_mean, x),
                None => {
                    let centered: Vec<f64> = x.iter().zip(&c.prior_mean).map(|(a, b)| a - b).collect();
                    Ok(forward_substitute(c.synth.as_ref(), &centered))
                }
            })
            .collect()
    }

    pub fn neg_log_posterior(&self, state: &PosteriorState) -> Result<f64> {
        Ok(self.term_breakdown(state)?.iter().map(|t| t.total).sum())
    }

    pub fn term_breakdown(&self, state: &PosteriorState) -> Result<Vec<TermBreakdown>> {
        self.check_state(state)?;
        Ok(self.evaluate(&state.z, &state.theta, None)?.1)
    }

    pub fn gradient(&self, state: &PosteriorState) -> Result<StateGradient> {
        self.check_state(state)?;
        let mut flat = vec![0.0; self.state_len()];
        self.evaluate(&state.z, &state.theta, Some(&mut flat))?;
        let split = self.unflatten(&flat)?;
        Ok(StateGradient {
            dz: split.z,
            dtheta: split.theta,
        })
    }

    /// MAGI objective written directly in the trajectory `x(I)`, using `K⁻¹` rather than
    /// the whitened coordinates. Only available for [`Method::Magi`].
    pub fn magi_objective_x(&self, xs: &[Vec<f64>], theta: &[f64]) -> Result<Vec<TermBreakdown>> {
        if xs.len() != self.components.len() || xs.iter().any(|x| x.len() != self.grid.len()) {
            return Err(precondition("trajectory shape does not match the grid"));
        }
        if theta.len() != self.system.param_count() {
            return Err(precondition("parameter length mismatch"));
        }
        let f = self.rhs_on_grid(xs, theta)?;
        let n = self.grid.len();
        let mut out = Vec::with_capacity(xs.len());
        for (d, c) in self.components.iter().enumerate() {
            let extra = c
                .magi
                .as_ref()
                .ok_or_else(|| precondition("the time-domain objective needs a MAGI precomputation"))?;
            let centered: Vec<f64> = xs[d].iter().zip(&c.prior_mean).map(|(a, b)| a - b).collect();
            let prior_term = 0.5 * extra.k_chol.quad_form(&centered);
            let mut mx = vec![0.0; n];
            linalg::mat_vec(extra.m.as_ref(), &centered, &mut mx);
            let r: Vec<f64> = f[d].iter().zip(&mx).map(|(a, b)| a - b).collect();
            let physics_term = 0.5 * c.physics_chol.quad_form(&r);
            let data_term = self.data_term(c, &xs[d]);
            out.push(breakdown(d, prior_term, physics_term, data_term));
        }
        check_finite(&out)?;
        Ok(out)
    }

    fn data_term(&self, c: &ComponentPrecomp, x: &[f64]) -> f64 {
        let inv_var = 1.0 / (c.noise_sd * c.noise_sd);
        0.5 * self
            .obs_index
            .iter()
            .zip(&c.obs_values)
            .map(|(&k, y)| (x[k] - y).powi(2) * inv_var)
            .sum::<f64>()
    }

    /// `f(x(t_k), θ, t_k)` for every grid point, one row per component.
    fn rhs_on_grid(&self, xs: &[Vec<f64>], theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let dim = xs.len();
        let n = self.grid.len();
        let mut f = vec![vec![0.0; n]; dim];
        let mut state = vec![0.0; dim];
        let mut out = vec![0.0; dim];
        for (k, &t) in self.grid.points().iter().enumerate() {
            for d in 0..dim {
                state[d] = xs[d][k];
            }
            self.system.rhs_into(&state, theta, t, &mut out);
            for d in 0..dim {
                if !out[d].is_finite() {
                    return Err(Error::Domain {
                        system: self.system.name().to_string(),
                        component: d,
                    });
                }
                f[d][k] = out[d];
            }
        }
        Ok(f)
    }

    /// Objective terms, and the flat gradient when `grad` is given.
    fn evaluate(&self, z: &[Vec<f64>], theta: &[f64], grad: Option<&mut [f64]>) -> Result<(f64, Vec<TermBreakdown>)> {
        let dim = self.components.len();
        let n = self.grid.len();
        let xs = self.synthesize(z);
        let f = self.rhs_on_grid(&xs, theta)?;

        let mut terms = Vec::with_capacity(dim);
        let mut weights = Vec::with_capacity(dim);
        for (d, c) in self.components.iter().enumerate() {
            let mut r = match &self.fourier {
                Some(op) => op.apply(&f[d]),
                None => f[d].clone(),
            };
            let mut bz = vec![0.0; r.len()];
            linalg::mat_vec(c.b.as_ref(), &z[d], &mut bz);
            for (ri, b) in r.iter_mut().zip(&bz) {
                *ri -= b;
            }
            let w = c.physics_chol.solve_vec(&r);
            let physics_term = 0.5 * linalg::dot(&r, &w);
            let prior_term = 0.5 * linalg::dot(&z[d], &z[d]);
            let data_term = self.data_term(c, &xs[d]);
            terms.push(breakdown(d, prior_term, physics_term, data_term));
            weights.push(w);
        }
        check_finite(&terms)?;
        let total = terms.iter().map(|t| t.total).sum();

        let Some(grad) = grad else {
            return Ok((total, terms));
        };

        // g_e = Aᵀ w_e, the sensitivity of the physics term to f_e on the grid
        let g: Vec<Vec<f64>> = weights
            .iter()
            .map(|w| match &self.fourier {
                Some(op) => {
                    let mut out = vec![0.0; n];
                    linalg::mat_t_vec(op.matrix(), w, &mut out);
                    out
                }
                None => w.clone(),
            })
            .collect();

        let np = self.system.param_count();
        let mut gx = vec![vec![0.0; n]; dim];
        let mut dtheta = vec![0.0; np];
        let mut state = vec![0.0; dim];
        let mut js = vec![0.0; dim * dim];
        let mut jp = vec![0.0; dim * np];
        for (k, &t) in self.grid.points().iter().enumerate() {
            for d in 0..dim {
                state[d] = xs[d][k];
            }
            self.system.jacobians_into(&state, theta, t, &mut js, &mut jp);
            for e in 0..dim {
                let ge = g[e][k];
                if ge == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    gx[d][k] += ge * js[e * dim + d];
                }
                for p in 0..np {
                    dtheta[p] += ge * jp[e * np + p];
                }
            }
        }

        let j = self.coeff_len();
        for (d, c) in self.components.iter().enumerate() {
            let inv_var = 1.0 / (c.noise_sd * c.noise_sd);
            for (&k, y) in self.obs_index.iter().zip(&c.obs_values) {
                gx[d][k] += (xs[d][k] - y) * inv_var;
            }
            let dz = &mut grad[d * j..(d + 1) * j];
            linalg::mat_t_vec(c.synth.as_ref(), &gx[d], dz);
            let mut btw = vec![0.0; j];
            linalg::mat_t_vec(c.b.as_ref(), &weights[d], &mut btw);
            for ((g, zi), b) in dz.iter_mut().zip(&z[d]).zip(&btw) {
                *g += zi - b;
            }
        }
        grad[dim * j..].copy_from_slice(&dtheta);
        if grad.iter().any(|v| !v.is_finite()) {
            let sum = |f: fn(&TermBreakdown) -> f64| terms.iter().map(f).sum();
            return Err(Error::NonFiniteObjective {
                prior: sum(|t| t.prior_term),
                physics: sum(|t| t.physics_term),
                data: sum(|t| t.data_term),
            });
        }
        Ok((total, terms))
    }
}

impl Objective for PosteriorPrecomp {
    fn dim(&self) -> usize {
        self.state_len()
    }

    fn value_and_gradient(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        let state = self.unflatten(params)?;
        match self.evaluate(&state.z, &state.theta, Some(grad)) {
            Ok((total, _)) => Ok(total),
            // leaving the rhs domain is a divergence for the optimizer, not a caller error
            Err(Error::Domain { .. } | Error::NonFiniteObjective { .. }) => Ok(f64::NAN),
            Err(e) => Err(e),
        }
    }

    fn project(&self, params: &mut [f64]) {
        let start = params.len() - self.system.param_count();
        self.system.clamp_params(&mut params[start..]);
    }
}

fn breakdown(component: usize, prior_term: f64, physics_term: f64, data_term: f64) -> TermBreakdown {
    TermBreakdown {
        component,
        prior_term,
        physics_term,
        data_term,
        total: prior_term + physics_term + data_term,
    }
}

fn check_finite(terms: &[TermBreakdown]) -> Result<()> {
    if terms.iter().all(|t| t.total.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFiniteObjective {
        prior: terms.iter().map(|t| t.prior_term).sum(),
        physics: terms.iter().map(|t| t.physics_term).sum(),
        data: terms.iter().map(|t| t.data_term).sum(),
    })
}

/// Solves `L u = b` for a lower-triangular `L`.
fn forward_substitute(l: faer::MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut u = b.to_vec();
    for c in 0..n {
        u[c] /= l.read(c, c);
        let uc = u[c];
        for r in (c + 1)..n {
            u[r] -= l.read(r, c) * uc;
        }
    }
    u
}

/// MAGI objective for an explicit trajectory, assembling the precomputation on the fly.
pub fn magi_neg_log_posterior(
    system: Arc<dyn OdeSystem>,
    grid: &TimeGrid,
    hps: &[KernelHyperparams],
    obs: &ObservationSet,
    xs: &[Vec<f64>],
    theta: &[f64],
) -> Result<f64> {
    let pc = PosteriorPrecomp::new(system, grid, hps, obs, Method::Magi)?;
    Ok(pc.magi_objective_x(xs, theta)?.iter().map(|t| t.total).sum())
}
