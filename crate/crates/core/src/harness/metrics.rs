//! Trajectory RMSE against ground truth and parameter errors.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Result};
use crate::ode::{integrate_rk4, OdeSystem, Trajectory};
use crate::optimizer::InferenceResult;

/// Ground truth for evaluation: the trajectory on the evaluation grid, the end of the
/// fit window and the true parameters.
#[derive(Debug, Clone)]
pub struct TruthSpec {
    pub trajectory: Trajectory,
    pub fit_end: f64,
    pub params: Vec<f64>,
}

impl TruthSpec {
    /// Number of leading evaluation points inside the fit window.
    pub fn fit_points(&self) -> usize {
        let tol = 1e-9 * self.trajectory.grid.end().abs().max(1.0);
        self.trajectory
            .grid
            .points()
            .iter()
            .take_while(|&&t| t <= self.fit_end + tol)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub rmse_fit: Vec<f64>,
    pub rmse_forecast: Vec<f64>,
    pub rmse_combined: Vec<f64>,
    pub param_error: Vec<f64>,
    pub wall_time: f64,
    pub converged: bool,
    /// The reconstruction left the finite range; RMSEs are then `+∞`.
    pub diverged: bool,
}

/// Integrates from `(x0, θ)` over the evaluation grid and scores it against the truth.
/// Returns the reconstruction when it stayed finite.
pub fn evaluate_point(
    system: &dyn OdeSystem,
    x0: &[f64],
    theta: &[f64],
    truth: &TruthSpec,
) -> Result<(MetricsRow, Option<Trajectory>)> {
    let dim = system.dim();
    if x0.len() != dim || theta.len() != system.param_count() || truth.params.len() != theta.len() {
        return Err(precondition("state or parameter length does not match the system"));
    }
    let param_error: Vec<f64> = theta.iter().zip(&truth.params).map(|(a, b)| (a - b).abs()).collect();
    let recon = if x0.iter().chain(theta).all(|v| v.is_finite()) {
        integrate_rk4(system, x0, theta, &truth.trajectory.grid).ok()
    } else {
        None
    };
    let Some(recon) = recon else {
        let inf = vec![f64::INFINITY; dim];
        let row = MetricsRow {
            rmse_fit: inf.clone(),
            rmse_forecast: inf.clone(),
            rmse_combined: inf,
            param_error,
            wall_time: 0.0,
            converged: true,
            diverged: true,
        };
        return Ok((row, None));
    };
    let split = truth.fit_points();
    let rmse = |d: usize, range: std::ops::Range<usize>| {
        let len = range.len();
        if len == 0 {
            return 0.0;
        }
        let ss: f64 = range
            .map(|k| (recon.values[d][k] - truth.trajectory.values[d][k]).powi(2))
            .sum();
        (ss / len as f64).sqrt()
    };
    let n = truth.trajectory.grid.len();
    let row = MetricsRow {
        rmse_fit: (0..dim).map(|d| rmse(d, 0..split)).collect(),
        rmse_forecast: (0..dim).map(|d| rmse(d, split..n)).collect(),
        rmse_combined: (0..dim).map(|d| rmse(d, 0..n)).collect(),
        param_error,
        wall_time: 0.0,
        converged: true,
        diverged: false,
    };
    Ok((row, Some(recon)))
}

/// Scores an inference result from its first reconstructed state and θ̂.
pub fn evaluate_rmse(result: &InferenceResult, system: &dyn OdeSystem, truth: &TruthSpec) -> Result<MetricsRow> {
    let (mut row, _) = evaluate_point(system, &result.initial_state(), &result.theta_hat, truth)?;
    row.wall_time = result.wall_time;
    row.converged = result.converged;
    Ok(row)
}
