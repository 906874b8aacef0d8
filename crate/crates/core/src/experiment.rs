//! Experiment configuration, multi-seed orchestration and CSV artifacts.
//!
//! Artifact schemas (lowercase headers, `\n` line endings, floats written
//! with 17 significant digits so they parse back exactly):
//!
//! | file               | columns                                           |
//! |--------------------|---------------------------------------------------|
//! | `gains.csv`        | `t, g11, g12, …, gnn, ric11, …, ricnn`            |
//! | `cost.csv`         | `repeat, iteration, cost`                         |
//! | `trajectories.csv` | `sample, t, x1, xrev1, yrev1`                     |
//! | `oracle.csv`       | `t, d11, …, dnn` (averaged gains minus Riccati)   |
//! | `summary.json`     | [`RunSummary`]                                    |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{matrix_from_rows, matrix_to_rows};
use crate::lq::{optimal_cost_from_gains, riccati_solve, GainSchedule, LqParams, LqProblem};
use crate::rng::{self, Purpose};
use crate::solver::{solve, SolverConfig, SolverOutput};

/// LQ problem data as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub q_f: Vec<Vec<f64>>,
    pub m0: Vec<f64>,
    pub sigma0: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
    pub output_dir: PathBuf,
    /// Samples written to `trajectories.csv`.
    #[serde(default = "default_trajectory_samples")]
    pub trajectory_samples: usize,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_repeats() -> usize {
    1
}

fn default_trajectory_samples() -> usize {
    20
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::config(
            format!("problem.{field}"),
            "must not be empty",
        ));
    }
    matrix_from_rows(rows)
        .ok_or_else(|| Error::config(format!("problem.{field}"), "rows have different lengths"))
}

impl ProblemConfig {
    pub fn from_problem(prob: &LqProblem) -> Self {
        let p = prob.params();
        Self {
            a: matrix_to_rows(&p.a),
            b: matrix_to_rows(&p.b),
            sigma: matrix_to_rows(&p.sigma),
            q: matrix_to_rows(&p.q),
            r: matrix_to_rows(&p.r),
            q_f: matrix_to_rows(&p.q_f),
            m0: p.m0.iter().copied().collect(),
            sigma0: matrix_to_rows(&p.sigma0),
        }
    }

    pub fn to_problem(&self, horizon: f64) -> Result<LqProblem> {
        LqProblem::new(LqParams {
            a: matrix("a", &self.a)?,
            b: matrix("b", &self.b)?,
            sigma: matrix("sigma", &self.sigma)?,
            q: matrix("q", &self.q)?,
            r: matrix("r", &self.r)?,
            q_f: matrix("q_f", &self.q_f)?,
            m0: DVector::from_vec(self.m0.clone()),
            sigma0: matrix("sigma0", &self.sigma0)?,
            horizon,
        })
    }
}

impl ExperimentConfig {
    /// The two-dimensional mass-spring reproduction, averaged over 10 seeds.
    pub fn mass_spring() -> Self {
        Self {
            problem: ProblemConfig::from_problem(&LqProblem::mass_spring()),
            grid: GridConfig {
                horizon: 1.0,
                dt: 0.02,
            },
            solver: SolverConfig::mass_spring(),
            n_repeats: 10,
            output_dir: PathBuf::from("results/mass-spring"),
            trajectory_samples: 20,
        }
    }

    pub fn problem(&self) -> Result<LqProblem> {
        self.problem.to_problem(self.grid.horizon)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.dt)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem()?;
        self.time_grid()?;
        self.solver.validate()?;
        if self.n_repeats < 1 {
            return Err(Error::config("n_repeats", "must be at least 1"));
        }
        if self.trajectory_samples > self.solver.n_samples {
            return Err(Error::config(
                "trajectory_samples",
                "exceeds solver.n_samples",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Parses and validates a JSON config.
pub fn parse_config(json: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(json)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn save_config(cfg: &ExperimentConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Entrywise comparison of regression gains with the Riccati solution.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub times: Vec<f64>,
    /// `G₁(t_k) - G_ric(t_k)` at every grid point.
    pub diffs: Vec<DMatrix<f64>>,
    /// Last grid index included in the RMS window.
    pub window_end: usize,
    /// Time-RMS of each entry over the window.
    pub rms_per_entry: DMatrix<f64>,
    /// Largest entry of `rms_per_entry`.
    pub max_entry_rms: f64,
    /// RMS over all entries and window points.
    pub rms: f64,
}

/// Compares gains on `t ∈ [0, T - 2Δt]`; the two final points are excluded
/// because the terminal regression is trivially exact there.
pub fn compare_gains(
    gains: &[DMatrix<f64>],
    oracle: &GainSchedule,
    grid: &TimeGrid,
) -> OracleReport {
    assert_eq!(
        gains.len(),
        oracle.n_points(),
        "compare_gains: grid length mismatch"
    );
    let n = oracle.g1[0].nrows();
    let diffs: Vec<DMatrix<f64>> = gains.iter().zip(&oracle.g1).map(|(g, r)| g - r).collect();
    let window_end = grid.n_steps().saturating_sub(2);
    let count = (window_end + 1) as f64;
    let mut sq = DMatrix::zeros(n, n);
    for d in &diffs[..=window_end] {
        sq += d.component_mul(d);
    }
    let rms = (sq.sum() / (count * (n * n) as f64)).sqrt();
    let rms_per_entry = (sq / count).map(f64::sqrt);
    OracleReport {
        times: grid.times().collect(),
        diffs,
        window_end,
        max_entry_rms: rms_per_entry.max(),
        rms_per_entry,
        rms,
    }
}

#[derive(Debug)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub result: Result<SolverOutput>,
}

/// Runs `solve` for seeds `seed, seed + 1, …` concurrently.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<RepeatOutcome>> {
    cfg.validate()?;
    let prob = cfg.problem()?;
    let grid = cfg.time_grid()?;
    Ok((0..cfg.n_repeats)
        .into_par_iter()
        .map(|repeat| {
            let seed = cfg.solver.seed.wrapping_add(repeat as u64);
            let solver = SolverConfig {
                seed,
                ..cfg.solver.clone()
            };
            RepeatOutcome {
                repeat,
                seed,
                result: solve(&prob, &grid, &solver),
            }
        })
        .collect())
}

/// Mean of the final gains over successful repeats, summed in repeat order.
pub fn average_gains(outcomes: &[RepeatOutcome]) -> Option<Vec<DMatrix<f64>>> {
    let ok: Vec<&SolverOutput> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .collect();
    let first = ok.first()?;
    let mut sum: Vec<DMatrix<f64>> = first.gains.g1.clone();
    for out in &ok[1..] {
        for (s, g) in sum.iter_mut().zip(&out.gains.g1) {
            *s += g;
        }
    }
    let scale = 1.0 / ok.len() as f64;
    Some(sum.into_iter().map(|s| s * scale).collect())
}

fn first_failure(outcomes: Vec<RepeatOutcome>) -> Error {
    outcomes
        .into_iter()
        .find_map(|o| o.result.err())
        .expect("called only when every repeat failed")
}

/// Solves every repeat and compares the averaged gains with the Riccati solution.
pub fn compare_oracle(cfg: &ExperimentConfig) -> Result<OracleReport> {
    let outcomes = run_repeats(cfg)?;
    let Some(avg) = average_gains(&outcomes) else {
        return Err(first_failure(outcomes));
    };
    let prob = cfg.problem()?;
    let grid = cfg.time_grid()?;
    Ok(compare_gains(&avg, &riccati_solve(&prob, &grid)?, &grid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainsTable {
    pub times: Vec<f64>,
    pub mean_gains: Vec<DMatrix<f64>>,
    pub riccati: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub repeat: usize,
    /// 1-based.
    pub iteration: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub sample: usize,
    pub t: f64,
    pub x1: f64,
    pub xrev1: f64,
    pub yrev1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatFailure {
    pub repeat: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub n_repeats: usize,
    pub n_succeeded: usize,
    pub config_hash: String,
    pub wall_time_secs: f64,
    /// Last recorded cost, averaged over successful repeats.
    pub final_cost: f64,
    pub optimal_cost: f64,
    pub gain_rms: f64,
    pub gain_rms_max_entry: f64,
    pub gain_rms_per_entry: Vec<Vec<f64>>,
    pub failures: Vec<RepeatFailure>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub gains_csv: PathBuf,
    pub cost_csv: PathBuf,
    pub trajectories_csv: PathBuf,
    pub oracle_csv: PathBuf,
    pub summary_json: PathBuf,
    pub gains: GainsTable,
    pub costs: Vec<CostRow>,
    pub trajectories: Vec<TrajectoryRow>,
    pub report: OracleReport,
    pub summary: RunSummary,
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to String");
}

fn entry_headers(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).flat_map(move |i| (1..=n).map(move |j| format!("{prefix}{i}{j}")))
}

pub fn gains_csv(table: &GainsTable) -> String {
    let n = table.mean_gains.first().map_or(0, DMatrix::nrows);
    let mut out = String::from("t");
    for h in entry_headers("g", n).chain(entry_headers("ric", n)) {
        out.push(',');
        out.push_str(&h);
    }
    out.push('\n');
    for ((t, g), r) in table
        .times
        .iter()
        .zip(&table.mean_gains)
        .zip(&table.riccati)
    {
        num(&mut out, *t);
        for m in [g, r] {
            for v in m.transpose().iter() {
                out.push(',');
                num(&mut out, *v);
            }
        }
        out.push('\n');
    }
    out
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("repeat,iteration,cost\n");
    for r in rows {
        write!(out, "{},{},", r.repeat, r.iteration).expect("write to String");
        num(&mut out, r.cost);
        out.push('\n');
    }
    out
}

pub fn trajectories_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("sample,t,x1,xrev1,yrev1\n");
    for r in rows {
        write!(out, "{},", r.sample).expect("write to String");
        for (idx, v) in [r.t, r.x1, r.xrev1, r.yrev1].into_iter().enumerate() {
            if idx > 0 {
                out.push(',');
            }
            num(&mut out, v);
        }
        out.push('\n');
    }
    out
}

pub fn oracle_csv(report: &OracleReport) -> String {
    let n = report.diffs.first().map_or(0, DMatrix::nrows);
    let mut out = String::from("t");
    for h in entry_headers("d", n) {
        out.push(',');
        out.push_str(&h);
    }
    out.push('\n');
    for (t, d) in report.times.iter().zip(&report.diffs) {
        num(&mut out, *t);
        for v in d.transpose().iter() {
            out.push(',');
            num(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

/// Reads a header-checked CSV into rows of fields.
fn read_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => {
            return Err(parse_err(
                1,
                format!(
                    "expected header `{header}`, found `{}`",
                    other.unwrap_or("")
                ),
            ))
        }
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let fields: Vec<String> = l.split(',').map(str::to_owned).collect();
            if fields.len() != width {
                return Err(parse_err(
                    i + 2,
                    format!("expected {width} fields, found {}", fields.len()),
                ));
            }
            Ok(fields)
        })
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        reason: format!("cannot parse `{s}`"),
    })
}

pub fn read_gains_csv(path: impl AsRef<Path>, n: usize) -> Result<GainsTable> {
    let path = path.as_ref();
    let header = std::iter::once("t".to_string())
        .chain(entry_headers("g", n))
        .chain(entry_headers("ric", n))
        .collect::<Vec<_>>()
        .join(",");
    let rows = read_rows(path, &header)?;
    let mut table = GainsTable {
        times: Vec::new(),
        mean_gains: Vec::new(),
        riccati: Vec::new(),
    };
    for (i, row) in rows.iter().enumerate() {
        let vals: Vec<f64> = row
            .iter()
            .map(|s| field(path, i + 2, s))
            .collect::<Result<_>>()?;
        table.times.push(vals[0]);
        table
            .mean_gains
            .push(DMatrix::from_row_slice(n, n, &vals[1..1 + n * n]));
        table
            .riccati
            .push(DMatrix::from_row_slice(n, n, &vals[1 + n * n..]));
    }
    Ok(table)
}

pub fn read_cost_csv(path: impl AsRef<Path>) -> Result<Vec<CostRow>> {
    let path = path.as_ref();
    read_rows(path, "repeat,iteration,cost")?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(CostRow {
                repeat: field(path, i + 2, &r[0])?,
                iteration: field(path, i + 2, &r[1])?,
                cost: field(path, i + 2, &r[2])?,
            })
        })
        .collect()
}

pub fn read_trajectories_csv(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRow>> {
    let path = path.as_ref();
    read_rows(path, "sample,t,x1,xrev1,yrev1")?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            Ok(TrajectoryRow {
                sample: field(path, line, &r[0])?,
                t: field(path, line, &r[1])?,
                x1: field(path, line, &r[2])?,
                xrev1: field(path, line, &r[3])?,
                yrev1: field(path, line, &r[4])?,
            })
        })
        .collect()
}

/// Sorted random subset of sample indices drawn from the config seed.
pub fn trajectory_subset(seed: u64, n_samples: usize, count: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, Purpose::TrajectorySubset, 0);
    let mut picked = index::sample(&mut rng, n_samples, count.min(n_samples)).into_vec();
    picked.sort_unstable();
    picked
}

fn trajectory_rows(out: &SolverOutput, grid: &TimeGrid, samples: &[usize]) -> Vec<TrajectoryRow> {
    let mut rows = Vec::with_capacity(samples.len() * grid.n_points());
    for &i in samples {
        for k in 0..grid.n_points() {
            rows.push(TrajectoryRow {
                sample: i,
                t: grid.time(k),
                x1: out.forward_states.at(i, k)[0],
                xrev1: out.reversed_states.at(i, k)[0],
                yrev1: out.adjoints.at(i, k)[0],
            });
        }
    }
    rows
}

/// Runs all repeats and writes the artifacts into `cfg.output_dir`.
///
/// Fails only if every repeat fails; individual failures are listed in the
/// summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let start = Instant::now();
    let prob = cfg.problem()?;
    let grid = cfg.time_grid()?;
    let outcomes = run_repeats(cfg)?;
    let Some(avg) = average_gains(&outcomes) else {
        return Err(first_failure(outcomes));
    };
    let riccati = riccati_solve(&prob, &grid)?;
    let report = compare_gains(&avg, &riccati, &grid);

    let mut costs = Vec::new();
    let mut failures = Vec::new();
    let mut final_costs = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(out) => {
                costs.extend(
                    out.cost_history
                        .iter()
                        .enumerate()
                        .map(|(k, &cost)| CostRow {
                            repeat: o.repeat,
                            iteration: k + 1,
                            cost,
                        }),
                );
                final_costs.push(*out.cost_history.last().expect("n_iters >= 1"));
            }
            Err(e) => failures.push(RepeatFailure {
                repeat: o.repeat,
                seed: o.seed,
                error: e.to_string(),
            }),
        }
    }
    let first_ok = outcomes
        .iter()
        .find_map(|o| o.result.as_ref().ok())
        .expect("at least one repeat succeeded");
    let subset = trajectory_subset(
        cfg.solver.seed,
        cfg.solver.n_samples,
        cfg.trajectory_samples,
    );
    let trajectories = trajectory_rows(first_ok, &grid, &subset);
    let gains = GainsTable {
        times: grid.times().collect(),
        mean_gains: avg,
        riccati: riccati.g1.clone(),
    };

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let gains_path = dir.join("gains.csv");
    let cost_path = dir.join("cost.csv");
    let traj_path = dir.join("trajectories.csv");
    let oracle_path = dir.join("oracle.csv");
    let summary_path = dir.join("summary.json");
    fs::write(&gains_path, gains_csv(&gains))?;
    fs::write(&cost_path, cost_csv(&costs))?;
    fs::write(&traj_path, trajectories_csv(&trajectories))?;
    fs::write(&oracle_path, oracle_csv(&report))?;

    let summary = RunSummary {
        seed: cfg.solver.seed,
        n_repeats: cfg.n_repeats,
        n_succeeded: final_costs.len(),
        config_hash: cfg.hash(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        final_cost: final_costs.iter().sum::<f64>() / final_costs.len() as f64,
        optimal_cost: optimal_cost_from_gains(&prob, &grid, &riccati),
        gain_rms: report.rms,
        gain_rms_max_entry: report.max_entry_rms,
        gain_rms_per_entry: matrix_to_rows(&report.rms_per_entry),
        failures,
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(&summary_path, json)?;

    Ok(RunArtifacts {
        gains_csv: gains_path,
        cost_csv: cost_path,
        trajectories_csv: traj_path,
        oracle_csv: oracle_path,
        summary_json: summary_path,
        gains,
        costs,
        trajectories,
        report,
        summary,
    })
}

/// Writes `diagnostics.json` describing a failed run; returns its path.
pub fn write_diagnostics(dir: impl AsRef<Path>, err: &Error) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Diagnostics<'a> {
        error: String,
        kind: &'a str,
        iteration: Option<usize>,
        sample: Option<usize>,
        step: Option<usize>,
    }
    let mut iteration = None;
    let mut inner = err;
    while let Error::Iteration {
        iteration: it,
        source,
    } = inner
    {
        iteration = Some(*it);
        inner = source;
    }
    let (kind, location) = match inner {
        Error::NonFinite { location, .. } => ("non-finite", Some(*location)),
        Error::Diverged { location, .. } => ("diverged", Some(*location)),
        Error::Singular { location, .. } => ("singular", Some(*location)),
        _ => ("other", None),
    };
    let diag = Diagnostics {
        error: err.to_string(),
        kind,
        iteration,
        sample: location.and_then(|l| l.sample),
        step: location.and_then(|l| l.step),
    };
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let path = dir.join("diagnostics.json");
    let mut json = serde_json::to_string_pretty(&diag)?;
    json.push('\n');
    fs::write(&path, json)?;
    Ok(path)
}
