//! Ground truth and synthetic observations for the benchmark systems.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{precondition, Result};
use crate::observations::ObservationSet;
use crate::ode::{integrate_rk4, Benchmark, TimeGrid, Trajectory};

/// Points of the evaluation grid spanning the fit and forecast windows.
pub const EVAL_POINTS: usize = 2561;
/// Ground truth is integrated this many times finer than the evaluation grid.
pub const TRUTH_OVERSAMPLE: usize = 8;
pub const DEFAULT_OBSERVATIONS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizons {
    /// Observations lie on `[0, observation]`.
    pub observation: f64,
    /// Evaluation covers `[0, evaluation]`; the part after `observation` is the forecast.
    pub evaluation: f64,
}

impl Horizons {
    pub fn for_benchmark(bench: Benchmark) -> Self {
        let t = bench.observation_horizon();
        Self {
            observation: t,
            evaluation: 2.0 * t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.observation > 0.0) || !(self.evaluation > self.observation) || !self.evaluation.is_finite() {
            return Err(precondition(format!(
                "horizons need 0 < observation < evaluation (got {} and {})",
                self.observation, self.evaluation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub benchmark: Benchmark,
    pub horizons: Horizons,
    pub observations: usize,
    pub noise_sd: f64,
}

impl DatasetSpec {
    pub fn new(benchmark: Benchmark) -> Self {
        Self {
            benchmark,
            horizons: Horizons::for_benchmark(benchmark),
            observations: DEFAULT_OBSERVATIONS,
            noise_sd: benchmark.noise_sd(),
        }
    }
}

/// Ground truth on the evaluation grid, integrated at `TRUTH_OVERSAMPLE`× finer steps.
pub fn ground_truth(bench: Benchmark, horizons: &Horizons) -> Result<Trajectory> {
    horizons.validate()?;
    let fine = fine_truth(bench, horizons)?;
    Ok(fine.subsample(TRUTH_OVERSAMPLE))
}

fn fine_truth(bench: Benchmark, horizons: &Horizons) -> Result<Trajectory> {
    let n = (EVAL_POINTS - 1) * TRUTH_OVERSAMPLE + 1;
    let grid = TimeGrid::uniform(0.0, horizons.evaluation, n)?;
    integrate_rk4(
        &*bench.system(),
        &bench.true_initial_state(),
        &bench.true_params(),
        &grid,
    )
}

/// Noisy observations at equally spaced times on the observation window.
///
/// The noise for `(component, index)` depends only on the system, the seed and that
/// pair, so datasets do not depend on generation order or thread count.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<ObservationSet> {
    spec.horizons.validate()?;
    if spec.observations < 5 {
        return Err(precondition("at least five observation times are required"));
    }
    if !(spec.noise_sd >= 0.0) {
        return Err(precondition("noise level must be non-negative"));
    }
    let bench = spec.benchmark;
    let tau = TimeGrid::uniform(0.0, spec.horizons.observation, spec.observations)?;
    let truth = truth_at(bench, &spec.horizons, &tau)?;
    let name = bench.as_str();
    let values = truth
        .iter()
        .enumerate()
        .map(|(d, row)| {
            row.iter()
                .enumerate()
                .map(|(i, v)| v + spec.noise_sd * standard_normal(name, seed, d as u64, i as u64))
                .collect()
        })
        .collect();
    ObservationSet::new(name, tau, values, vec![spec.noise_sd; bench.system().dim()], seed)
}

/// Truth at the observation times, taken from the fine evaluation integration when the
/// times land on it and integrated separately otherwise.
fn truth_at(bench: Benchmark, horizons: &Horizons, tau: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    let fine_intervals = ((EVAL_POINTS - 1) * TRUTH_OVERSAMPLE) as f64;
    let stride = fine_intervals * horizons.observation / (horizons.evaluation * (tau.len() - 1) as f64);
    if (stride - stride.round()).abs() < 1e-9 && stride >= 1.0 {
        let stride = stride.round() as usize;
        let fine = fine_truth(bench, horizons)?;
        return Ok(fine
            .values
            .iter()
            .map(|row| (0..tau.len()).map(|i| row[i * stride]).collect())
            .collect());
    }
    let fine = integrate_rk4(
        &*bench.system(),
        &bench.true_initial_state(),
        &bench.true_params(),
        &tau.refine(9),
    )?;
    Ok(fine.subsample(1 << 9).values)
}

/// Standard normal draw addressed by `(system, seed, component, index)`.
///
/// A ChaCha20 stream keyed by a hash of the system name and seed, with the component as
/// stream id and the index fixing the word position; Box–Muller on two 53-bit uniforms.
pub fn standard_normal(system: &str, seed: u64, component: u64, index: u64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(b"observation-noise/");
    hasher.update(system.as_bytes());
    hasher.update(seed.to_le_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(component);
    rng.set_word_pos(u128::from(index) * 4);
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
