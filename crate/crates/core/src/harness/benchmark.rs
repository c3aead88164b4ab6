//! The experiment matrix: every (config, seed) cell is simulated, inferred and scored,
//! then aggregated into flat CSV tables and a JSON manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{generate_dataset, ground_truth, DatasetSpec, Horizons, DEFAULT_OBSERVATIONS};
use super::metrics::{evaluate_rmse, MetricsRow, TruthSpec};
use crate::error::{precondition, Result};
use crate::kernels::FitOptions;
use crate::ode::Benchmark;
use crate::optimizer::{OptimizerConfig, Problem};
use crate::posterior::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Efigp,
    Magi,
}

fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}

fn default_observations() -> usize {
    DEFAULT_OBSERVATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: Benchmark,
    pub discretization: usize,
    pub method: MethodKind,
    /// Truncations default to the stabilized table for the system and discretization.
    #[serde(default)]
    pub eigen: Option<usize>,
    #[serde(default)]
    pub fourier: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Defaults to the system's noise level.
    #[serde(default)]
    pub noise_sd: Option<f64>,
    /// Use the generating noise level instead of fitting it.
    #[serde(default)]
    pub known_noise: bool,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub horizons: Option<Horizons>,
    #[serde(default = "default_observations")]
    pub observations: usize,
}

impl ExperimentConfig {
    pub fn new(system: Benchmark, discretization: usize, method: MethodKind) -> Self {
        Self {
            system,
            discretization,
            method,
            eigen: None,
            fourier: None,
            seeds: default_seeds(),
            noise_sd: None,
            known_noise: false,
            optimizer: OptimizerConfig::default(),
            horizons: None,
            observations: DEFAULT_OBSERVATIONS,
        }
    }

    pub fn method(&self) -> Method {
        match self.method {
            MethodKind::Magi => Method::Magi,
            MethodKind::Efigp => {
                let (j, l) = self.system.default_truncation(self.discretization);
                Method::Efigp {
                    eigen: self.eigen.unwrap_or(j),
                    fourier: self.fourier.unwrap_or(l),
                }
            }
        }
    }

    pub fn horizons(&self) -> Horizons {
        self.horizons.unwrap_or_else(|| Horizons::for_benchmark(self.system))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            benchmark: self.system,
            horizons: self.horizons(),
            observations: self.observations,
            noise_sd: self.noise_sd.unwrap_or_else(|| self.system.noise_sd()),
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            noise_sd: self.known_noise.then(|| self.dataset_spec().noise_sd),
            ..FitOptions::default()
        }
    }

    /// Short stable hash of the canonical JSON form, seeds excluded.
    pub fn config_hash(&self) -> String {
        let mut key = self.clone();
        key.seeds.clear();
        let json = serde_json::to_string(&key).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(precondition("an experiment needs at least one seed"));
        }
        if self.noise_sd.is_some_and(|s| !(s >= 0.0)) {
            return Err(precondition("noise level must be non-negative"));
        }
        self.horizons().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMatrix {
    pub experiments: Vec<ExperimentConfig>,
    /// Run cells one at a time for cleaner wall-time measurement.
    #[serde(default)]
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub system: Benchmark,
    pub method: MethodKind,
    pub discretization: usize,
    pub eigen: Option<usize>,
    pub fourier: Option<usize>,
    pub seed: u64,
    pub metrics: MetricsRow,
    pub iterations: usize,
    pub objective: f64,
    /// Set when the cell failed before it could be scored.
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.metrics.diverged
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: usize,
    pub failures: usize,
    pub rmse_mean: Vec<f64>,
    pub rmse_sd: Vec<f64>,
    pub rmse_fit_mean: Vec<f64>,
    pub rmse_forecast_mean: Vec<f64>,
    pub param_error_mean: Vec<f64>,
    pub param_error_sd: Vec<f64>,
    pub wall_time_mean: f64,
    pub wall_time_sd: f64,
    pub wall_time_median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

/// Runs one cell; failures become diverged rows rather than errors.
pub fn run_cell(cfg: &ExperimentConfig, seed: u64, truth: &TruthSpec) -> RunRecord {
    let method = cfg.method();
    let (eigen, fourier) = match method {
        Method::Efigp { eigen, fourier } => (Some(eigen), Some(fourier)),
        Method::Magi => (None, None),
    };
    let mut record = RunRecord {
        config_hash: cfg.config_hash(),
        system: cfg.system,
        method: cfg.method,
        discretization: cfg.discretization,
        eigen,
        fourier,
        seed,
        metrics: failed_metrics(cfg.system),
        iterations: 0,
        objective: f64::NAN,
        error: None,
    };
    let outcome = (|| -> Result<_> {
        let obs = generate_dataset(&cfg.dataset_spec(), seed)?;
        let mut opt = cfg.optimizer.clone();
        opt.seed = seed;
        let problem = Problem::new(cfg.system.system(), obs, cfg.discretization, &cfg.fit_options())?;
        let result = problem.infer(method, &opt)?;
        let metrics = evaluate_rmse(&result, &*cfg.system.system(), truth)?;
        Ok((result, metrics))
    })();
    match outcome {
        Ok((result, metrics)) => {
            record.metrics = metrics;
            record.iterations = result.iterations;
            record.objective = result.objective;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

fn failed_metrics(bench: Benchmark) -> MetricsRow {
    let dim = bench.system().dim();
    let inf = vec![f64::INFINITY; dim];
    MetricsRow {
        rmse_fit: inf.clone(),
        rmse_forecast: inf.clone(),
        rmse_combined: inf,
        param_error: vec![f64::NAN; bench.system().param_count()],
        wall_time: 0.0,
        converged: false,
        diverged: true,
    }
}

pub fn truth_for(cfg: &ExperimentConfig) -> Result<TruthSpec> {
    let h = cfg.horizons();
    Ok(TruthSpec {
        trajectory: ground_truth(cfg.system, &h)?,
        fit_end: h.observation,
        params: cfg.system.true_params(),
    })
}

/// Executes every cell of the matrix and aggregates per experiment.
///
/// Cells are independent and run on the rayon pool unless `sequential` is set; rows are
/// ordered by config hash then seed, so the report does not depend on scheduling.
pub fn run_benchmark(matrix: &BenchmarkMatrix) -> Result<BenchmarkReport> {
    for cfg in &matrix.experiments {
        cfg.validate()?;
    }
    let truths = matrix.experiments.iter().map(truth_for).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, u64)> = matrix
        .experiments
        .iter()
        .enumerate()
        .flat_map(|(i, cfg)| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let run = |&(i, seed): &(usize, u64)| run_cell(&matrix.experiments[i], seed, &truths[i]);
    let mut runs: Vec<RunRecord> = if matrix.sequential {
        cells.iter().map(run).collect()
    } else {
        cells.par_iter().map(run).collect()
    };
    runs.sort_by(|a, b| a.config_hash.cmp(&b.config_hash).then(a.seed.cmp(&b.seed)));

    let mut configs: Vec<(String, ExperimentConfig)> = matrix
        .experiments
        .iter()
        .map(|c| (c.config_hash(), c.clone()))
        .collect();
    configs.sort_by(|a, b| a.0.cmp(&b.0));
    configs.dedup_by(|a, b| a.0 == b.0);
    let aggregates = configs
        .into_iter()
        .map(|(hash, config)| {
            let rows: Vec<&RunRecord> = runs.iter().filter(|r| r.config_hash == hash).collect();
            aggregate(hash, config, &rows)
        })
        .collect();
    Ok(BenchmarkReport { runs, aggregates })
}

fn aggregate(config_hash: String, config: ExperimentConfig, rows: &[&RunRecord]) -> Aggregate {
    let ok: Vec<&MetricsRow> = rows.iter().filter(|r| !r.failed()).map(|r| &r.metrics).collect();
    let dim = config.system.system().dim();
    let np = config.system.system().param_count();
    let column = |f: &dyn Fn(&MetricsRow) -> f64| -> Vec<f64> { ok.iter().map(|m| f(m)).collect() };
    let per = |k: usize, f: &dyn Fn(&MetricsRow, usize) -> f64| -> (Vec<f64>, Vec<f64>) {
        (0..k).map(|i| mean_sd(&column(&|m| f(m, i)))).unzip()
    };
    let (rmse_mean, rmse_sd) = per(dim, &|m, i| m.rmse_combined[i]);
    let (rmse_fit_mean, _) = per(dim, &|m, i| m.rmse_fit[i]);
    let (rmse_forecast_mean, _) = per(dim, &|m, i| m.rmse_forecast[i]);
    let (param_error_mean, param_error_sd) = per(np, &|m, i| m.param_error[i]);
    let times: Vec<f64> = rows
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| r.metrics.wall_time)
        .collect();
    let (wall_time_mean, wall_time_sd) = mean_sd(&times);
    Aggregate {
        config_hash,
        config,
        runs: rows.len(),
        failures: rows.len() - ok.len(),
        rmse_mean,
        rmse_sd,
        rmse_fit_mean,
        rmse_forecast_mean,
        param_error_mean,
        param_error_sd,
        wall_time_mean,
        wall_time_sd,
        wall_time_median: median(&times),
    }
}

/// Mean and sample standard deviation; NaN when empty.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(";")
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "na".into()
    } else {
        format!("{x}")
    }
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn method_str(m: MethodKind) -> &'static str {
    match m {
        MethodKind::Efigp => "efigp",
        MethodKind::Magi => "magi",
    }
}

impl BenchmarkReport {
    /// Per-run rows; contains no timing, so it is reproducible byte for byte.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from(
            "config_hash,system,method,discretization,eigen,fourier,seed,failed,converged,iterations,objective,rmse_combined,rmse_fit,rmse_forecast,param_error,error\n",
        );
        for r in &self.runs {
            let m = &r.metrics;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.config_hash,
                r.system,
                method_str(r.method),
                r.discretization,
                opt(r.eigen),
                opt(r.fourier),
                r.seed,
                r.failed(),
                m.converged,
                r.iterations,
                fmt_num(r.objective),
                join(&m.rmse_combined),
                join(&m.rmse_fit),
                join(&m.rmse_forecast),
                join(&m.param_error),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            )
            .unwrap();
        }
        s
    }

    fn key(a: &Aggregate) -> String {
        let (j, l) = match a.config.method() {
            Method::Efigp { eigen, fourier } => (Some(eigen), Some(fourier)),
            Method::Magi => (None, None),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            a.config_hash,
            a.config.system,
            method_str(a.config.method),
            a.config.discretization,
            opt(j),
            opt(l),
            a.runs,
            a.failures
        )
    }

    /// Trajectory RMSE per component, mean and SD over successful runs.
    pub fn rmse_csv(&self) -> String {
        let mut s = String::from(
            "config_hash,system,method,discretization,eigen,fourier,runs,failures,rmse_mean,rmse_sd,rmse_fit_mean,rmse_forecast_mean\n",
        );
        for a in &self.aggregates {
            writeln!(
                s,
                "{},{},{},{},{}",
                Self::key(a),
                join(&a.rmse_mean),
                join(&a.rmse_sd),
                join(&a.rmse_fit_mean),
                join(&a.rmse_forecast_mean)
            )
            .unwrap();
        }
        s
    }

    pub fn param_error_csv(&self) -> String {
        let mut s = String::from(
            "config_hash,system,method,discretization,eigen,fourier,runs,failures,param_error_mean,param_error_sd\n",
        );
        for a in &self.aggregates {
            writeln!(
                s,
                "{},{},{}",
                Self::key(a),
                join(&a.param_error_mean),
                join(&a.param_error_sd)
            )
            .unwrap();
        }
        s
    }

    /// Inference wall times; varies between runs by nature.
    pub fn runtime_csv(&self) -> String {
        let mut s = String::from("config_hash,system,method,discretization,eigen,fourier,runs,failures,wall_time_mean,wall_time_sd,wall_time_median,wall_times\n");
        for a in &self.aggregates {
            let times: Vec<f64> = self
                .runs
                .iter()
                .filter(|r| r.config_hash == a.config_hash && r.error.is_none())
                .map(|r| r.metrics.wall_time)
                .collect();
            writeln!(
                s,
                "{},{},{},{},{}",
                Self::key(a),
                fmt_num(a.wall_time_mean),
                fmt_num(a.wall_time_sd),
                fmt_num(a.wall_time_median),
                join(&times)
            )
            .unwrap();
        }
        s
    }

    pub fn manifest_json(&self) -> String {
        let experiments: Vec<serde_json::Value> = self
            .aggregates
            .iter()
            .map(|a| {
                serde_json::json!({
                    "config_hash": a.config_hash,
                    "config": a.config,
                    "seeds": self.runs.iter().filter(|r| r.config_hash == a.config_hash).map(|r| r.seed).collect::<Vec<_>>(),
                })
            })
            .collect();
        let manifest = serde_json::json!({
            "experiments": experiments,
            "files": {
                "runs": "runs.csv",
                "rmse": "rmse.csv",
                "param_error": "param_error.csv",
                "runtime": "runtime.csv",
            },
        });
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"
    }

    /// Writes all tables into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("runs.csv"), self.runs_csv())?;
        fs::write(dir.join("rmse.csv"), self.rmse_csv())?;
        fs::write(dir.join("param_error.csv"), self.param_error_csv())?;
        fs::write(dir.join("runtime.csv"), self.runtime_csv())?;
        fs::write(dir.join("manifest.json"), self.manifest_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: MethodKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(Benchmark::Fn, 41, method);
        cfg.seeds = vec![0, 1];
        cfg.optimizer.max_iters = 200;
        cfg
    }

    #[test]
    fn bookkeeping_two_seeds_one_aggregate() {
        let report = run_benchmark(&BenchmarkMatrix {
            experiments: vec![tiny(MethodKind::Efigp)],
            sequential: false,
        })
        .unwrap();
        assert_eq!(report.runs.len(), 2);
        assert_eq!(report.aggregates.len(), 1);
        assert_eq!(report.runs_csv().lines().count(), 3);
        assert_eq!(report.rmse_csv().lines().count(), 2);
    }

    #[test]
    fn config_json_defaults_and_hash() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"system":"fn","discretization":161,"method":"efigp"}"#).unwrap();
        assert_eq!(cfg.seeds.len(), 20);
        assert_eq!(cfg.method(), Method::Efigp { eigen: 81, fourier: 21 });
        let mut other = cfg.clone();
        other.seeds = vec![3];
        assert_eq!(cfg.config_hash(), other.config_hash());
        other.discretization = 81;
        assert_ne!(cfg.config_hash(), other.config_hash());
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"system":"fn","discretization":161,"method":"efigp","bogus":1}"#
        )
        .is_err());
    }

    #[test]
    fn failing_cells_do_not_abort_the_matrix() {
        let mut bad = tiny(MethodKind::Efigp);
        bad.discretization = 100;
        bad.seeds = vec![0];
        let report = run_benchmark(&BenchmarkMatrix {
            experiments: vec![bad],
            sequential: true,
        })
        .unwrap();
        assert_eq!(report.runs.len(), 1);
        assert!(report.runs[0].failed() && report.runs[0].error.is_some());
        assert_eq!(report.aggregates[0].failures, 1);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(mean_sd(&[]).0.is_nan());
    }
}
