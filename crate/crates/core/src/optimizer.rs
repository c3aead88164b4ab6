//! MAP inference: hyperparameter fitting, initialization, Adam, and the truncation
//! stabilization loop.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::{self, AdamConfig};
use crate::error::{precondition, Result};
use crate::kernels::{self, FitOptions, FittedHyperparams, KernelHyperparams};
use crate::observations::ObservationSet;
use crate::ode::{OdeSystem, TimeGrid};
use crate::posterior::{Method, PosteriorPrecomp, PosteriorState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Relative objective change over `window` iterations that counts as converged.
    pub tol: f64,
    pub window: usize,
    pub trace_every: usize,
    /// Recorded for provenance; Adam itself is deterministic.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            max_iters: adam.max_iters,
            tol: adam.tol,
            window: adam.window,
            trace_every: adam.trace_every,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            max_iters: self.max_iters,
            tol: self.tol,
            window: self.window,
            trace_every: self.trace_every,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub system: String,
    pub method: Method,
    pub grid_start: f64,
    pub grid_end: f64,
    pub discretization: usize,
    pub theta_hat: Vec<f64>,
    pub x_hat: Vec<Vec<f64>>,
    pub z_hat: Vec<Vec<f64>>,
    pub hyperparams: Vec<FittedHyperparams>,
    pub objective: f64,
    /// `(iteration, objective)` samples.
    pub objective_trace: Vec<(usize, f64)>,
    pub converged: bool,
    pub iterations: usize,
    /// Precomputation plus optimization, in seconds.
    pub wall_time: f64,
}

impl InferenceResult {
    /// First point of the reconstructed trajectory.
    pub fn initial_state(&self) -> Vec<f64> {
        self.x_hat.iter().map(|row| row[0]).collect()
    }
}

/// Fits kernel hyperparameters once per component on the observations.
pub fn fit_all_hyperparameters(obs: &ObservationSet, opts: &FitOptions) -> Result<Vec<FittedHyperparams>> {
    (0..obs.dim())
        .map(|d| kernels::fit_hyperparameters(d, obs.tau.points(), &obs.values[d], opts))
        .collect()
}

/// Coefficients reproducing the GP smoothing mean of each component; θ at the box midpoint.
pub fn initialize_state(pc: &PosteriorPrecomp, obs: &ObservationSet) -> Result<PosteriorState> {
    let grid = pc.grid().points();
    let means = pc
        .components()
        .iter()
        .enumerate()
        .map(|(d, c)| {
            let (mean, _) =
                kernels::gp_smooth_posterior(obs.tau.points(), &obs.values[d], &c.hyperparams, c.prior_mean[0], grid)?;
            Ok(mean)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorState {
        z: pc.coefficients_for(&means)?,
        theta: pc.system().param_midpoint(),
    })
}

/// Runs Adam on the joint `(z, θ)` vector, clamping θ to its box after every step.
pub fn optimize_map(
    pc: &PosteriorPrecomp,
    init: &PosteriorState,
    cfg: &OptimizerConfig,
) -> Result<(PosteriorState, adam::AdamOutcome)> {
    let outcome = adam::minimize(pc, &init.flatten(), &cfg.adam())?;
    Ok((pc.unflatten(&outcome.params)?, outcome))
}

/// One inference problem: a system, its data and the grid the physics is enforced on.
#[derive(Clone)]
pub struct Problem {
    pub system: Arc<dyn OdeSystem>,
    pub obs: ObservationSet,
    pub grid: TimeGrid,
    pub hyperparams: Vec<FittedHyperparams>,
}

impl Problem {
    /// Fits hyperparameters and refines the observation grid to `discretization` points.
    pub fn new(
        system: Arc<dyn OdeSystem>,
        obs: ObservationSet,
        discretization: usize,
        fit: &FitOptions,
    ) -> Result<Self> {
        let grid = nested_grid(&obs.tau, discretization)?;
        let hyperparams = fit_all_hyperparameters(&obs, fit)?;
        Ok(Self {
            system,
            obs,
            grid,
            hyperparams,
        })
    }

    pub fn kernel_hyperparams(&self) -> Vec<KernelHyperparams> {
        self.hyperparams.iter().map(FittedHyperparams::hyperparams).collect()
    }

    /// Precomputes, initializes and optimizes. Wall time covers precomputation and
    /// optimization only.
    pub fn infer(&self, method: Method, cfg: &OptimizerConfig) -> Result<InferenceResult> {
        let start = Instant::now();
        let pc = PosteriorPrecomp::new(
            self.system.clone(),
            &self.grid,
            &self.kernel_hyperparams(),
            &self.obs,
            method,
        )?;
        let init = initialize_state(&pc, &self.obs)?;
        let (state, outcome) = optimize_map(&pc, &init, cfg)?;
        let wall_time = start.elapsed().as_secs_f64();
        let x_hat = pc.trajectory(&state)?;
        Ok(InferenceResult {
            system: self.system.name().to_string(),
            method,
            grid_start: self.grid.start(),
            grid_end: self.grid.end(),
            discretization: self.grid.len(),
            theta_hat: state.theta,
            x_hat,
            z_hat: state.z,
            hyperparams: self.hyperparams.clone(),
            objective: outcome.objective,
            objective_trace: outcome.trace,
            converged: outcome.converged,
            iterations: outcome.iterations,
            wall_time,
        })
    }
}

/// Grid of `discretization` points on the observation window that contains every
/// observation time, built by repeated midpoint insertion.
pub fn nested_grid(tau: &TimeGrid, discretization: usize) -> Result<TimeGrid> {
    let intervals = tau.len() - 1;
    if discretization < 2
        || (discretization - 1) % intervals != 0
        || !((discretization - 1) / intervals).is_power_of_two()
    {
        return Err(precondition(format!(
            "discretization {discretization} is not a midpoint refinement of {} observation times",
            tau.len()
        )));
    }
    let levels = ((discretization - 1) / intervals).trailing_zeros();
    Ok(tau.refine(levels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizeOutcome {
    pub eigen: usize,
    pub fourier: usize,
    pub stable: bool,
    pub result: InferenceResult,
    /// `(eigen, fourier, θ̂)` for every setting that was run.
    pub history: Vec<(usize, usize, Vec<f64>)>,
}

pub const DEFAULT_STAB_TOL: f64 = 0.05;

/// Runs EFiGP over the zipped truncation schedules (the shorter one repeats its last
/// value) until θ̂ changes by less than `stab_tol` (relative, max over parameters)
/// between consecutive settings, and returns the earlier setting of that pair.
pub fn stabilize_truncation(
    problem: &Problem,
    schedule_eigen: &[usize],
    schedule_fourier: &[usize],
    stab_tol: f64,
    cfg: &OptimizerConfig,
) -> Result<StabilizeOutcome> {
    if schedule_eigen.is_empty() || schedule_fourier.is_empty() {
        return Err(precondition("truncation schedules must be non-empty"));
    }
    if schedule_eigen.windows(2).any(|w| w[1] < w[0]) || schedule_fourier.windows(2).any(|w| w[1] < w[0]) {
        return Err(precondition("truncation schedules must be ascending"));
    }
    let n = problem.grid.len();
    if let Some(l) = schedule_fourier.iter().find(|&&l| 2 * l - 1 > n) {
        return Err(precondition(format!("fourier truncation {l} needs 2l-1 <= {n}")));
    }
    if let Some(j) = schedule_eigen.iter().find(|&&j| j > n) {
        return Err(precondition(format!("eigen truncation {j} exceeds the grid size {n}")));
    }

    let steps = schedule_eigen.len().max(schedule_fourier.len());
    let pick = |s: &[usize], i: usize| s[i.min(s.len() - 1)];
    let mut history = Vec::new();
    let mut previous: Option<(usize, usize, InferenceResult)> = None;
    for i in 0..steps {
        let (j, l) = (pick(schedule_eigen, i), pick(schedule_fourier, i));
        let result = problem.infer(Method::Efigp { eigen: j, fourier: l }, cfg)?;
        history.push((j, l, result.theta_hat.clone()));
        if let Some((pj, pl, prev)) = previous.take() {
            if relative_change(&prev.theta_hat, &result.theta_hat) < stab_tol {
                return Ok(StabilizeOutcome {
                    eigen: pj,
                    fourier: pl,
                    stable: true,
                    result: prev,
                    history,
                });
            }
        }
        previous = Some((j, l, result));
    }
    let (eigen, fourier, result) = previous.expect("at least one setting ran");
    Ok(StabilizeOutcome {
        eigen,
        fourier,
        stable: false,
        result,
        history,
    })
}

fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::Benchmark;

    fn constant_problem(value: f64) -> (PosteriorPrecomp, ObservationSet) {
        let tau = TimeGrid::uniform(0.0, 20.0, 11).unwrap();
        let obs = ObservationSet::new("fn", tau.clone(), vec![vec![value; 11]; 2], vec![0.2; 2], 0).unwrap();
        let hps = vec![KernelHyperparams::new(1.0, 2.0, 0.2); 2];
        let pc = PosteriorPrecomp::new(
            Benchmark::Fn.system(),
            &tau.refine(1),
            &hps,
            &obs,
            Method::Efigp { eigen: 15, fourier: 6 },
        )
        .unwrap();
        (pc, obs)
    }

    #[test]
    fn init_at_prior_mean_gives_zero_coefficients() {
        let (pc, obs) = constant_problem(0.7);
        let init = initialize_state(&pc, &obs).unwrap();
        assert!(init.z.iter().flatten().all(|v| v.abs() < 1e-8));
        assert_eq!(init.theta, vec![2.5, 2.5, 2.5]);
    }

    #[test]
    fn init_reproduces_smoothing_mean() {
        let tau = TimeGrid::uniform(0.0, 20.0, 21).unwrap();
        let values = vec![
            tau.points().iter().map(|t| (t * 0.5).sin()).collect(),
            tau.points().iter().map(|t| (t * 0.3).cos()).collect(),
        ];
        let obs = ObservationSet::new("fn", tau.clone(), values, vec![0.2; 2], 0).unwrap();
        let hps = vec![KernelHyperparams::new(1.0, 2.0, 0.1); 2];
        let grid = tau.refine(2);
        let pc = PosteriorPrecomp::new(
            Benchmark::Fn.system(),
            &grid,
            &hps,
            &obs,
            Method::Efigp { eigen: 41, fourier: 11 },
        )
        .unwrap();
        let init = initialize_state(&pc, &obs).unwrap();
        let x = pc.trajectory(&init).unwrap();
        for d in 0..2 {
            let c = &pc.components()[d];
            let (mean, _) =
                kernels::gp_smooth_posterior(tau.points(), &obs.values[d], &hps[d], c.prior_mean[0], grid.points())
                    .unwrap();
            let basis = c.basis.as_ref().unwrap();
            let norm = mean
                .iter()
                .zip(&c.prior_mean)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let err = x[d].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let bound = (1.0 - basis.captured_fraction()) * norm;
            assert!(err <= bound.max(1e-6 * norm), "component {d}: {err} vs {bound}");
        }
    }

    #[test]
    fn nested_grid_sizes() {
        let tau = TimeGrid::uniform(0.0, 20.0, 41).unwrap();
        for n in [41, 81, 161, 321, 641, 1281] {
            assert_eq!(nested_grid(&tau, n).unwrap().len(), n);
        }
        assert!(nested_grid(&tau, 100).is_err());
        assert!(nested_grid(&tau, 121).is_err());
    }

    #[test]
    fn relative_change_is_max_over_parameters() {
        assert_eq!(relative_change(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_change(&[1.0, 2.0], &[1.1, 2.0]) - 0.1).abs() < 1e-12);
    }
}
