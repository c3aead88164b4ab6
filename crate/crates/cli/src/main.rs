use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use efigp::harness::benchmark::{run_benchmark, BenchmarkMatrix};
use efigp::harness::data::{generate_dataset, ground_truth, DatasetSpec, Horizons};
use efigp::harness::metrics::{evaluate_point, TruthSpec};
use efigp::kernels::FitOptions;
use efigp::observations::ObservationSet;
use efigp::ode::Benchmark;
use efigp::optimizer::{stabilize_truncation, InferenceResult, OptimizerConfig, Problem, DEFAULT_STAB_TOL};
use efigp::posterior::Method;

#[derive(Parser)]
#[command(name = "efigp", version, about = "Physics-informed GP inference for ODE parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a noisy observation set from a benchmark system.
    Simulate(SimulateArgs),
    /// Run MAP inference on an observation set.
    Infer(InferArgs),
    /// Score an inference result against ground truth.
    Evaluate(EvaluateArgs),
    /// Run a matrix of experiments and write report tables.
    Benchmark(BenchmarkArgs),
    /// Increase truncations until the parameter estimate stops moving.
    Stabilize(StabilizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Fn,
    Lv,
    Hes1,
}

impl From<SystemArg> for Benchmark {
    fn from(s: SystemArg) -> Self {
        match s {
            SystemArg::Fn => Benchmark::Fn,
            SystemArg::Lv => Benchmark::Lv,
            SystemArg::Hes1 => Benchmark::Hes1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Efigp,
    Magi,
}

#[derive(Args)]
struct HorizonArgs {
    /// End of the observation window (defaults per system).
    #[arg(long)]
    obs_horizon: Option<f64>,
    /// End of the evaluation window (defaults to twice the observation window).
    #[arg(long)]
    eval_horizon: Option<f64>,
}

impl HorizonArgs {
    fn resolve(&self, bench: Benchmark) -> Horizons {
        let default = Horizons::for_benchmark(bench);
        let observation = self.obs_horizon.unwrap_or(default.observation);
        Horizons {
            observation,
            evaluation: self.eval_horizon.unwrap_or(2.0 * observation),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    system: SystemArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise SD (additive; in log space for lv and hes1). Defaults per system.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 41)]
    observations: usize,
    #[command(flatten)]
    horizons: HorizonArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizerArgs {
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 30_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fix the noise SD at the value recorded in the data file instead of fitting it.
    #[arg(long)]
    known_noise: bool,
}

impl OptimizerArgs {
    fn config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.lr,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    system: SystemArg,
    #[arg(long, value_enum, default_value = "efigp")]
    method: MethodArg,
    /// Number of discretization points (a midpoint refinement of the observation times).
    #[arg(long, default_value_t = 161)]
    disc: usize,
    /// Eigen truncation; defaults to the stabilized value for the system.
    #[arg(long)]
    eigen: Option<usize>,
    /// Fourier truncation; defaults to the stabilized value for the system.
    #[arg(long)]
    fourier: Option<usize>,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(long, value_enum)]
    system: SystemArg,
    /// Override the inferred parameters, comma separated.
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    /// Override the inferred initial state, comma separated (log space for lv and hes1).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[command(flatten)]
    horizons: HorizonArgs,
    #[arg(long)]
    out: PathBuf,
    /// Truth vs reconstruction table; defaults to trajectory.csv next to --out.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StabilizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    system: SystemArg,
    #[arg(long, default_value_t = 161)]
    disc: usize,
    #[arg(long, value_delimiter = ',', default_value = "21,41,81,161")]
    schedule_eigen: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "11,21,41,81")]
    schedule_fourier: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_STAB_TOL)]
    stab_tol: f64,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Stabilize(a) => stabilize(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let bench = Benchmark::from(a.system);
    let spec = DatasetSpec {
        benchmark: bench,
        horizons: a.horizons.resolve(bench),
        observations: a.observations,
        noise_sd: a.noise.unwrap_or_else(|| bench.noise_sd()),
    };
    let obs = generate_dataset(&spec, a.seed)?;
    obs.write_csv(BufWriter::new(create(&a.out)?))?;
    Ok(())
}

fn read_data(path: &Path, bench: Benchmark) -> Result<ObservationSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let obs = ObservationSet::read_csv(BufReader::new(file))?;
    if !obs.system.is_empty() && obs.system != bench.as_str() {
        bail!("{} holds data for `{}`, not `{bench}`", path.display(), obs.system);
    }
    Ok(obs)
}

fn problem(data: &Path, bench: Benchmark, disc: usize, opt: &OptimizerArgs) -> Result<Problem> {
    let obs = read_data(data, bench)?;
    let fit = FitOptions {
        noise_sd: opt
            .known_noise
            .then(|| obs.noise_sd.iter().cloned().fold(0.0, f64::max)),
        ..FitOptions::default()
    };
    Ok(Problem::new(bench.system(), obs, disc, &fit)?)
}

fn infer(a: InferArgs) -> Result<()> {
    let bench = Benchmark::from(a.system);
    let problem = problem(&a.data, bench, a.disc, &a.optimizer)?;
    let method = match a.method {
        MethodArg::Magi => Method::Magi,
        MethodArg::Efigp => {
            let (j, l) = bench.default_truncation(a.disc);
            Method::Efigp {
                eigen: a.eigen.unwrap_or(j),
                fourier: a.fourier.unwrap_or(l),
            }
        }
    };
    let result = problem.infer(method, &a.optimizer.config())?;
    write_json(&a.out, &result)?;
    eprintln!(
        "theta_hat = {:?} ({} iterations, converged: {}, {:.2}s)",
        result.theta_hat, result.iterations, result.converged, result.wall_time
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let bench = Benchmark::from(a.system);
    let result: InferenceResult = serde_json::from_reader(BufReader::new(
        File::open(&a.result).with_context(|| format!("opening {}", a.result.display()))?,
    ))?;
    let horizons = a.horizons.resolve(bench);
    let truth = TruthSpec {
        trajectory: ground_truth(bench, &horizons)?,
        fit_end: horizons.observation,
        params: bench.true_params(),
    };
    let theta = a.theta.unwrap_or_else(|| result.theta_hat.clone());
    let x0 = a.x0.unwrap_or_else(|| result.initial_state());
    let system = bench.system();
    let (mut metrics, recon) = evaluate_point(&*system, &x0, &theta, &truth)?;
    metrics.wall_time = result.wall_time;
    metrics.converged = result.converged;
    write_json(&a.out, &metrics)?;

    let traj_path = a
        .trajectory
        .unwrap_or_else(|| a.out.parent().unwrap_or(Path::new(".")).join("trajectory.csv"));
    let mut w = BufWriter::new(create(&traj_path)?);
    let dim = system.dim();
    let mut header = String::from("t");
    for d in 1..=dim {
        header.push_str(&format!(",truth_x{d}"));
    }
    for d in 1..=dim {
        header.push_str(&format!(",recon_x{d}"));
    }
    writeln!(w, "{header}")?;
    for (k, t) in truth.trajectory.grid.points().iter().enumerate() {
        let mut line = format!("{t:.16e}");
        for d in 0..dim {
            line.push_str(&format!(",{:.16e}", truth.trajectory.values[d][k]));
        }
        for d in 0..dim {
            match &recon {
                Some(r) => line.push_str(&format!(",{:.16e}", r.values[d][k])),
                None => line.push_str(",nan"),
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    eprintln!("combined RMSE per component: {:?}", metrics.rmse_combined);
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let matrix: BenchmarkMatrix = serde_json::from_str(&text).context("parsing the benchmark matrix")?;
    let report = run_benchmark(&matrix)?;
    report.write(&a.out)?;
    let failed = report.runs.iter().filter(|r| r.failed()).count();
    eprintln!(
        "{} runs, {failed} failed; tables written to {}",
        report.runs.len(),
        a.out.display()
    );
    Ok(())
}

fn stabilize(a: StabilizeArgs) -> Result<()> {
    let bench = Benchmark::from(a.system);
    let problem = problem(&a.data, bench, a.disc, &a.optimizer)?;
    // cap the default schedules by the grid size
    let n = a.disc;
    let eigen: Vec<usize> = a.schedule_eigen.iter().map(|&j| j.min(n)).collect();
    let fourier: Vec<usize> = a.schedule_fourier.iter().map(|&l| l.min((n + 1) / 2)).collect();
    let outcome = stabilize_truncation(&problem, &eigen, &fourier, a.stab_tol, &a.optimizer.config())?;
    println!(
        "eigen = {}, fourier = {}, stable = {}, theta_hat = {:?}",
        outcome.eigen, outcome.fourier, outcome.stable, outcome.result.theta_hat
    );
    if let Some(out) = a.out {
        write_json(&out, &outcome)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}
