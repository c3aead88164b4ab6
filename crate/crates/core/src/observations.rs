//! Noisy observations of a trajectory on an equally spaced grid, with a flat CSV form.

use std::io::{BufRead, Write};

use crate::error::{precondition, Error, Result};
use crate::ode::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub system: String,
    pub tau: TimeGrid,
    /// One row per component, one column per observation time.
    pub values: Vec<Vec<f64>>,
    /// Noise standard deviation used to generate each component.
    pub noise_sd: Vec<f64>,
    pub seed: u64,
}

impl ObservationSet {
    pub fn new(
        system: impl Into<String>,
        tau: TimeGrid,
        values: Vec<Vec<f64>>,
        noise_sd: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let set = Self {
            system: system.into(),
            tau,
            values,
            noise_sd,
            seed,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(precondition("observation set has no components"));
        }
        if self.noise_sd.len() != self.values.len() {
            return Err(precondition("one noise level per component is required"));
        }
        for row in &self.values {
            if row.len() != self.tau.len() {
                return Err(precondition("every component needs one value per observation time"));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(precondition("observations must be finite"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn sample_mean(&self, component: usize) -> f64 {
        let row = &self.values[component];
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// Index of each observation time within `grid`, by index arithmetic on nested grids.
    pub fn indices_in(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        let (n, m) = (grid.len(), self.len());
        let span = grid.end() - grid.start();
        let tol = 1e-9 * span.abs().max(1.0);
        if (n - 1) % (m - 1) != 0
            || (grid.start() - self.tau.start()).abs() > tol
            || (grid.end() - self.tau.end()).abs() > tol
        {
            return Err(precondition(format!(
                "a grid of {n} points on [{}, {}] does not nest {m} observations on [{}, {}]",
                grid.start(),
                grid.end(),
                self.tau.start(),
                self.tau.end()
            )));
        }
        let stride = (n - 1) / (m - 1);
        Ok((0..m).map(|i| i * stride).collect())
    }

    /// Writes `t,comp,value` rows (components numbered from 1) after `#` metadata lines.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# system={}", self.system)?;
        writeln!(out, "# seed={}", self.seed)?;
        let noise: Vec<String> = self.noise_sd.iter().map(|s| format!("{s:e}")).collect();
        writeln!(out, "# noise_sd={}", noise.join(";"))?;
        writeln!(out, "t,comp,value")?;
        for (d, row) in self.values.iter().enumerate() {
            for (t, v) in self.tau.points().iter().zip(row) {
                writeln!(out, "{t:.16e},{},{v:.16e}", d + 1)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut system = String::new();
        let mut seed = 0;
        let mut noise: Option<Vec<f64>> = None;
        let mut rows: Vec<(f64, usize, f64)> = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((key, value)) = meta.trim().split_once('=') {
                    match key.trim() {
                        "system" => system = value.trim().to_string(),
                        "seed" => seed = value.trim().parse().map_err(|_| parse_err(lineno, "bad seed"))?,
                        "noise_sd" => {
                            noise = Some(
                                value
                                    .split(';')
                                    .map(|s| s.trim().parse::<f64>())
                                    .collect::<std::result::Result<_, _>>()
                                    .map_err(|_| parse_err(lineno, "bad noise level"))?,
                            )
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                if line.replace(' ', "") != "t,comp,value" {
                    return Err(parse_err(lineno, "expected header t,comp,value"));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(lineno, "expected three fields"));
            }
            let t: f64 = fields[0].parse().map_err(|_| parse_err(lineno, "bad time"))?;
            let comp: usize = fields[1].parse().map_err(|_| parse_err(lineno, "bad component"))?;
            let v: f64 = fields[2].parse().map_err(|_| parse_err(lineno, "bad value"))?;
            if comp == 0 {
                return Err(parse_err(lineno, "components are numbered from 1"));
            }
            rows.push((t, comp - 1, v));
        }
        let dim = rows
            .iter()
            .map(|r| r.1 + 1)
            .max()
            .ok_or_else(|| Error::Parse("no observations".into()))?;
        let mut times: Vec<Vec<f64>> = vec![Vec::new(); dim];
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); dim];
        for (t, d, v) in rows {
            times[d].push(t);
            values[d].push(v);
        }
        if times.iter().any(|t| t != &times[0]) {
            return Err(Error::Parse(
                "all components must share the same observation times".into(),
            ));
        }
        let tau = TimeGrid::from_points(times.swap_remove(0)).map_err(|e| Error::Parse(e.to_string()))?;
        let noise_sd = noise.unwrap_or_else(|| vec![0.0; dim]);
        Self::new(system, tau, values, noise_sd, seed).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn parse_err(lineno: usize, msg: &str) -> Error {
    Error::Parse(format!("line {}: {msg}", lineno + 1))
}
