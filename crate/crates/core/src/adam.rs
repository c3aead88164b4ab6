//! Projected Adam minimizer over a flat parameter vector.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable objective to be minimized.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Returns the objective and writes its gradient into `grad`.
    fn value_and_gradient(&self, params: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Projects `params` back onto the feasible set after each step.
    fn project(&self, _params: &mut [f64]) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Relative objective change over `window` iterations that counts as converged.
    pub tol: f64,
    pub window: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Record the objective every `trace_every` iterations.
    pub trace_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_iters: 30_000,
            tol: 1e-9,
            window: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            trace_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamOutcome {
    pub params: Vec<f64>,
    pub objective: f64,
    /// `(iteration, objective)` samples.
    pub trace: Vec<(usize, f64)>,
    pub converged: bool,
    pub iterations: usize,
    pub wall_time: f64,
}

/// Minimizes `objective` from `init` with bias-corrected Adam, projecting after every step.
///
/// The returned parameters are the last iterate; the trace holds the objective at the
/// start and every `trace_every` iterations thereafter.
pub fn minimize(objective: &dyn Objective, init: &[f64], cfg: &AdamConfig) -> Result<AdamOutcome> {
    let start = Instant::now();
    let dim = objective.dim();
    if init.len() != dim {
        return Err(Error::Precondition(format!(
            "initial point has length {} but objective expects {dim}",
            init.len()
        )));
    }
    if !(cfg.learning_rate > 0.0) || cfg.max_iters == 0 {
        return Err(Error::Precondition(
            "learning rate must be positive and max_iters at least 1".into(),
        ));
    }

    let mut x = init.to_vec();
    objective.project(&mut x);
    let mut grad = vec![0.0; dim];
    let mut m = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let mut history: Vec<f64> = Vec::with_capacity(cfg.max_iters + 1);
    let mut trace = Vec::new();
    let mut last_finite = x.clone();

    let window = cfg.window.max(1);
    let trace_every = cfg.trace_every.max(1);
    let mut converged = false;
    let mut iterations = 0;
    let (mut b1t, mut b2t) = (1.0, 1.0);

    let mut f = objective.value_and_gradient(&x, &mut grad)?;
    loop {
        if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::OptimizerDiverged {
                iterations,
                last_finite,
            });
        }
        last_finite.copy_from_slice(&x);
        history.push(f);
        if iterations % trace_every == 0 {
            trace.push((iterations, f));
        }
        if iterations >= window {
            let old = history[iterations - window];
            if (old - f).abs() <= cfg.tol * f.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        if iterations >= cfg.max_iters {
            break;
        }

        iterations += 1;
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for i in 0..dim {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / (1.0 - b1t);
            let v_hat = v[i] / (1.0 - b2t);
            x[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        objective.project(&mut x);
        f = objective.value_and_gradient(&x, &mut grad)?;
    }
    if trace.last().map(|t| t.0) != Some(iterations) {
        trace.push((iterations, f));
    }

    Ok(AdamOutcome {
        params: x,
        objective: f,
        trace,
        converged,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Bowl(Vec<f64>);

    impl Objective for Bowl {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value_and_gradient(&self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            let mut f = 0.0;
            for i in 0..x.len() {
                g[i] = x[i] - self.0[i];
                f += 0.5 * g[i] * g[i];
            }
            Ok(f)
        }
    }

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn value_and_gradient(&self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        }
    }

    struct Boxed;

    impl Objective for Boxed {
        fn dim(&self) -> usize {
            1
        }
        fn value_and_gradient(&self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            g[0] = x[0] - 10.0;
            Ok(0.5 * (x[0] - 10.0).powi(2))
        }
        fn project(&self, x: &mut [f64]) {
            x[0] = x[0].clamp(-1.0, 1.0);
        }
    }

    struct Explodes;

    impl Objective for Explodes {
        fn dim(&self) -> usize {
            1
        }
        fn value_and_gradient(&self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            g[0] = -1.0;
            Ok(if x[0] > 0.5 { f64::NAN } else { -x[0] })
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = vec![1.5, -2.0, 0.25];
        let out = minimize(&Bowl(target.clone()), &[0.0; 3], &AdamConfig::default()).unwrap();
        for (a, b) in out.params.iter().zip(&target) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let out = minimize(&Rosenbrock, &[-1.2, 1.0], &AdamConfig::default()).unwrap();
        assert!(out.iterations <= 30_000);
        assert!(
            (out.params[0] - 1.0).abs() < 1e-2 && (out.params[1] - 1.0).abs() < 1e-2,
            "{:?}",
            out.params
        );
    }

    #[test]
    fn projection_keeps_iterates_feasible() {
        let out = minimize(&Boxed, &[5.0], &AdamConfig::default()).unwrap();
        assert_eq!(out.params[0], 1.0);
    }

    #[test]
    fn divergence_returns_last_finite_state() {
        let err = minimize(&Explodes, &[0.0], &AdamConfig::default()).unwrap_err();
        match err {
            Error::OptimizerDiverged { last_finite, .. } => assert!(last_finite[0] <= 0.5),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn deterministic_runs_are_identical() {
        let a = minimize(&Rosenbrock, &[0.0, 0.0], &AdamConfig::default()).unwrap();
        let b = minimize(&Rosenbrock, &[0.0, 0.0], &AdamConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
    }
}
