//! Benchmark ODE systems, equally spaced time grids and a fixed-step RK4 integrator.
//!
//! The integrator is only used to produce ground truth and to reconstruct trajectories
//! after inference; the inference objective itself never integrates.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};

/// Right-hand side `f(x, θ, t)` of an ODE system together with its analytic Jacobians.
pub trait OdeSystem: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn param_count(&self) -> usize;
    /// Per-parameter `[lo, hi]` bounds.
    fn param_box(&self) -> &[(f64, f64)];
    /// True when the state is the log of a positive system.
    fn log_space(&self) -> bool {
        false
    }
    fn rhs_into(&self, state: &[f64], params: &[f64], t: f64, out: &mut [f64]);
    /// Row-major `∂f/∂x` (D×D) and `∂f/∂θ` (D×P).
    fn jacobians_into(&self, state: &[f64], params: &[f64], t: f64, d_state: &mut [f64], d_params: &mut [f64]);

    fn clamp_params(&self, params: &mut [f64]) {
        for (p, &(lo, hi)) in params.iter_mut().zip(self.param_box()) {
            *p = p.clamp(lo, hi);
        }
    }

    fn param_midpoint(&self) -> Vec<f64> {
        self.param_box().iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

/// Evaluates the right-hand side, rejecting non-finite output.
pub fn eval_rhs(system: &dyn OdeSystem, state: &[f64], params: &[f64], t: f64) -> Result<Vec<f64>> {
    if state.len() != system.dim() || params.len() != system.param_count() {
        return Err(precondition(format!(
            "{} expects {} states and {} parameters",
            system.name(),
            system.dim(),
            system.param_count()
        )));
    }
    let mut out = vec![0.0; system.dim()];
    system.rhs_into(state, params, t, &mut out);
    if let Some(component) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain {
            system: system.name().to_string(),
            component,
        });
    }
    Ok(out)
}

/// FitzHugh–Nagumo: `ẋ₁ = c(x₁ − x₁³/3 + x₂)`, `ẋ₂ = −(x₁ − a + b x₂)/c`.
#[derive(Debug, Clone)]
pub struct FitzHughNagumo {
    bounds: [(f64, f64); 3],
}

impl Default for FitzHughNagumo {
    fn default() -> Self {
        Self {
            bounds: [(0.0, 5.0); 3],
        }
    }
}

impl OdeSystem for FitzHughNagumo {
    fn name(&self) -> &str {
        "fn"
    }
    fn dim(&self) -> usize {
        2
    }
    fn param_count(&self) -> usize {
        3
    }
    fn param_box(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn rhs_into(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) {
        let (a, b, c) = (p[0], p[1], p[2]);
        out[0] = c * (x[0] - x[0].powi(3) / 3.0 + x[1]);
        out[1] = -(x[0] - a + b * x[1]) / c;
    }

    fn jacobians_into(&self, x: &[f64], p: &[f64], _t: f64, ds: &mut [f64], dp: &mut [f64]) {
        let (a, b, c) = (p[0], p[1], p[2]);
        ds[0] = c * (1.0 - x[0] * x[0]);
        ds[1] = c;
        ds[2] = -1.0 / c;
        ds[3] = -b / c;

        dp[0] = 0.0;
        dp[1] = 0.0;
        dp[2] = x[0] - x[0].powi(3) / 3.0 + x[1];
        dp[3] = 1.0 / c;
        dp[4] = -x[1] / c;
        dp[5] = (x[0] - a + b * x[1]) / (c * c);
    }
}

/// Lotka–Volterra predator–prey: `ẋ₁ = a x₁ − b x₁x₂`, `ẋ₂ = c x₁x₂ − d x₂`.
#[derive(Debug, Clone)]
pub struct LotkaVolterra {
    bounds: [(f64, f64); 4],
}

impl Default for LotkaVolterra {
    fn default() -> Self {
        Self {
            bounds: [(0.0, 10.0); 4],
        }
    }
}

impl OdeSystem for LotkaVolterra {
    fn name(&self) -> &str {
        "lv-raw"
    }
    fn dim(&self) -> usize {
        2
    }
    fn param_count(&self) -> usize {
        4
    }
    fn param_box(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn rhs_into(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = p[0] * x[0] - p[1] * x[0] * x[1];
        out[1] = p[2] * x[0] * x[1] - p[3] * x[1];
    }

    fn jacobians_into(&self, x: &[f64], p: &[f64], _t: f64, ds: &mut [f64], dp: &mut [f64]) {
        ds[0] = p[0] - p[1] * x[1];
        ds[1] = -p[1] * x[0];
        ds[2] = p[2] * x[1];
        ds[3] = p[2] * x[0] - p[3];

        dp.iter_mut().for_each(|v| *v = 0.0);
        dp[0] = x[0];
        dp[1] = -x[0] * x[1];
        dp[4 + 2] = x[0] * x[1];
        dp[4 + 3] = -x[1];
    }
}

/// Hes1 oscillator (protein, mRNA, interacting factor) with parameters `(a, b, c, d, e, f, g)`.
#[derive(Debug, Clone)]
pub struct Hes1 {
    bounds: [(f64, f64); 7],
}

impl Default for Hes1 {
    fn default() -> Self {
        let unit = (0.0, 1.0);
        Self {
            bounds: [unit, unit, unit, unit, unit, (0.0, 50.0), unit],
        }
    }
}

impl OdeSystem for Hes1 {
    fn name(&self) -> &str {
        "hes1-raw"
    }
    fn dim(&self) -> usize {
        3
    }
    fn param_count(&self) -> usize {
        7
    }
    fn param_box(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn rhs_into(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) {
        let (a, b, c, d, e, f, g) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
        let hill = 1.0 / (1.0 + x[0] * x[0]);
        out[0] = -a * x[0] * x[2] + b * x[1] - c * x[0];
        out[1] = -d * x[1] + e * hill;
        out[2] = -a * x[0] * x[2] + f * hill - g * x[2];
    }

    fn jacobians_into(&self, x: &[f64], p: &[f64], _t: f64, ds: &mut [f64], dp: &mut [f64]) {
        let (a, b, c, d, e, f, g) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
        let hill = 1.0 / (1.0 + x[0] * x[0]);
        let dhill = -2.0 * x[0] * hill * hill;

        ds[0] = -a * x[2] - c;
        ds[1] = b;
        ds[2] = -a * x[0];
        ds[3] = e * dhill;
        ds[4] = -d;
        ds[5] = 0.0;
        ds[6] = -a * x[2] + f * dhill;
        ds[7] = 0.0;
        ds[8] = -a * x[0] - g;

        dp.iter_mut().for_each(|v| *v = 0.0);
        dp[0] = -x[0] * x[2];
        dp[1] = x[1];
        dp[2] = -x[0];
        dp[7 + 3] = -x[1];
        dp[7 + 4] = hill;
        dp[14] = -x[0] * x[2];
        dp[14 + 5] = hill;
        dp[14 + 6] = -x[2];
    }
}

/// A positive system expressed in `u = log x`: `du/dt = f(eᵘ, θ, t) / eᵘ`.
#[derive(Debug, Clone)]
pub struct LogSpace<S> {
    inner: S,
    name: String,
}

impl<S: OdeSystem> LogSpace<S> {
    pub fn new(inner: S, name: impl Into<String>) -> Self {
        Self {
            inner,
            name: name.into(),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: OdeSystem> OdeSystem for LogSpace<S> {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
    fn param_box(&self) -> &[(f64, f64)] {
        self.inner.param_box()
    }
    fn log_space(&self) -> bool {
        true
    }

    fn rhs_into(&self, u: &[f64], p: &[f64], t: f64, out: &mut [f64]) {
        let x: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        self.inner.rhs_into(&x, p, t, out);
        for (o, xi) in out.iter_mut().zip(&x) {
            *o /= xi;
        }
    }

    fn jacobians_into(&self, u: &[f64], p: &[f64], t: f64, ds: &mut [f64], dp: &mut [f64]) {
        let dim = self.dim();
        let np = self.param_count();
        let x: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let mut f = vec![0.0; dim];
        self.inner.rhs_into(&x, p, t, &mut f);
        self.inner.jacobians_into(&x, p, t, ds, dp);
        // ∂g_i/∂u_k = (∂f_i/∂x_k) x_k / x_i − δ_ik f_i / x_i
        for i in 0..dim {
            for k in 0..dim {
                ds[i * dim + k] *= x[k] / x[i];
            }
            ds[i * dim + i] -= f[i] / x[i];
            for q in 0..np {
                dp[i * np + q] /= x[i];
            }
        }
    }
}

/// The three shipped benchmark problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Fn,
    Lv,
    Hes1,
}

impl Benchmark {
    pub const ALL: [Benchmark; 3] = [Benchmark::Fn, Benchmark::Lv, Benchmark::Hes1];

    pub fn system(self) -> Arc<dyn OdeSystem> {
        match self {
            Benchmark::Fn => Arc::new(FitzHughNagumo::default()),
            Benchmark::Lv => Arc::new(LogSpace::new(LotkaVolterra::default(), "lv")),
            Benchmark::Hes1 => Arc::new(LogSpace::new(Hes1::default(), "hes1")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Fn => "fn",
            Benchmark::Lv => "lv",
            Benchmark::Hes1 => "hes1",
        }
    }

    pub fn true_params(self) -> Vec<f64> {
        match self {
            Benchmark::Fn => vec![0.2, 0.2, 3.0],
            Benchmark::Lv => vec![1.5, 1.0, 1.0, 3.0],
            Benchmark::Hes1 => vec![0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3],
        }
    }

    /// Initial condition in the inference state space (log space for LV and Hes1).
    pub fn true_initial_state(self) -> Vec<f64> {
        match self {
            Benchmark::Fn => vec![-1.0, 1.0],
            Benchmark::Lv => vec![5.0f64.ln(), 0.2f64.ln()],
            Benchmark::Hes1 => [1.438575f64, 2.037488, 17.90385].iter().map(|v| v.ln()).collect(),
        }
    }

    /// End of the observation window; the evaluation window is twice as long.
    pub fn observation_horizon(self) -> f64 {
        match self {
            Benchmark::Fn => 20.0,
            Benchmark::Lv => 12.0,
            Benchmark::Hes1 => 240.0,
        }
    }

    /// Default observation noise SD (additive for FN, additive in log space otherwise).
    pub fn noise_sd(self) -> f64 {
        match self {
            Benchmark::Fn => 0.2,
            Benchmark::Lv | Benchmark::Hes1 => 0.1,
        }
    }

    /// Stabilized `(eigen, fourier)` truncation for a discretization size.
    pub fn default_truncation(self, discretization: usize) -> (usize, usize) {
        let row = match discretization {
            0..=41 => 0,
            42..=81 => 1,
            82..=161 => 2,
            162..=321 => 3,
            322..=641 => 4,
            _ => 5,
        };
        let (e, f): ([usize; 6], [usize; 6]) = match self {
            Benchmark::Fn => ([41, 41, 81, 81, 81, 81], [11, 11, 21, 41, 41, 41]),
            Benchmark::Hes1 => ([21, 81, 81, 81, 81, 81], [11, 21, 21, 41, 41, 41]),
            Benchmark::Lv => ([41, 41, 81, 81, 81, 81], [21, 21, 41, 41, 41, 41]),
        };
        let j = e[row].min(discretization);
        let l = f[row].min((discretization + 1) / 2);
        (j, l)
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fn" | "fitzhugh-nagumo" => Ok(Benchmark::Fn),
            "lv" | "lotka-volterra" => Ok(Benchmark::Lv),
            "hes1" => Ok(Benchmark::Hes1),
            other => Err(Error::Parse(format!("unknown system `{other}`"))),
        }
    }
}

impl std::fmt::Display for Benchmark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Strictly increasing, equally spaced time points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    /// `n` equally spaced points from `start` to `end` inclusive.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 || !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(precondition(format!(
                "grid needs n >= 2 and start < end (got n={n}, [{start}, {end}])"
            )));
        }
        let h = (end - start) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| start + h * i as f64).collect();
        points[n - 1] = end;
        Ok(Self { points })
    }

    /// Validates and wraps arbitrary points.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        let grid = Self { points };
        grid.check_equally_spaced()?;
        Ok(grid)
    }

    fn check_equally_spaced(&self) -> Result<()> {
        let p = &self.points;
        if p.len() < 2 {
            return Err(precondition("grid needs at least two points"));
        }
        let h = self.step();
        if !(h > 0.0) || p.iter().any(|v| !v.is_finite()) {
            return Err(precondition("grid must be finite and strictly increasing"));
        }
        for (i, w) in p.windows(2).enumerate() {
            let d = w[1] - w[0];
            // relative to the grid's magnitude: differences of large times carry roundoff
            if (d - h).abs() > 1e-12 * (p[0].abs() + p[p.len() - 1].abs()).max(h) {
                return Err(precondition(format!(
                    "grid is not equally spaced at index {i} (step {d} vs {h})"
                )));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn step(&self) -> f64 {
        (self.end() - self.start()) / (self.len() - 1) as f64
    }

    /// Refines by repeated midpoint insertion, so every original point is kept at
    /// index `i · 2^levels`.
    pub fn refine(&self, levels: u32) -> Self {
        let n = (self.len() - 1) * (1usize << levels) + 1;
        Self::uniform(self.start(), self.end(), n).expect("refining a valid grid")
    }
}

/// One row per component, one column per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub values: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn state_at(&self, index: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[index]).collect()
    }

    /// Keeps every `stride`-th point.
    pub fn subsample(&self, stride: usize) -> Trajectory {
        let pts: Vec<f64> = self.grid.points().iter().step_by(stride).copied().collect();
        Trajectory {
            grid: TimeGrid { points: pts },
            values: self
                .values
                .iter()
                .map(|row| row.iter().step_by(stride).copied().collect())
                .collect(),
        }
    }

    /// `t,x1,...,xD` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("t");
        for d in 0..self.dim() {
            write!(header, ",x{}", d + 1).unwrap();
        }
        writeln!(out, "{header}")?;
        for (k, t) in self.grid.points().iter().enumerate() {
            let mut line = format!("{t:.16e}");
            for row in &self.values {
                write!(line, ",{:.16e}", row[k]).unwrap();
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Classical fixed-step fourth-order Runge–Kutta with the grid spacing as step.
pub fn integrate_rk4(system: &dyn OdeSystem, x0: &[f64], params: &[f64], grid: &TimeGrid) -> Result<Trajectory> {
    let dim = system.dim();
    if x0.len() != dim || params.len() != system.param_count() {
        return Err(precondition("initial state or parameter length mismatch"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(precondition("initial state must be finite"));
    }
    grid.check_equally_spaced()?;

    let n = grid.len();
    let mut values = vec![vec![0.0; n]; dim];
    for (row, &v) in values.iter_mut().zip(x0) {
        row[0] = v;
    }

    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut tmp = vec![0.0; dim];
    let pts = grid.points();
    for i in 1..n {
        let t = pts[i - 1];
        let h = pts[i] - t;
        system.rhs_into(&x, params, t, &mut k1);
        for d in 0..dim {
            tmp[d] = x[d] + 0.5 * h * k1[d];
        }
        system.rhs_into(&tmp, params, t + 0.5 * h, &mut k2);
        for d in 0..dim {
            tmp[d] = x[d] + 0.5 * h * k2[d];
        }
        system.rhs_into(&tmp, params, t + 0.5 * h, &mut k3);
        for d in 0..dim {
            tmp[d] = x[d] + h * k3[d];
        }
        system.rhs_into(&tmp, params, t + h, &mut k4);
        for d in 0..dim {
            x[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: pts[i] });
        }
        for (row, &v) in values.iter_mut().zip(&x) {
            row[i] = v;
        }
    }
    Ok(Trajectory {
        grid: grid.clone(),
        values,
    })
}
