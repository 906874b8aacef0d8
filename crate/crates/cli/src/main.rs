//! `fbsde`: run the time-reversal solver experiments from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
//! failures (a `diagnostics.json` is written to the output directory).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use fbsde_core::experiment::{self, ExperimentConfig};
use fbsde_core::{optimal_cost_oracle, riccati_solve, Error};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    MassSpring,
}

/// Time-reversal FBSDE solver for linear-quadratic stochastic control.
///
/// Flags override the corresponding config fields. Without `--config` the
/// mass-spring preset is used. `FBSDE_THREADS` caps the worker count
/// (0 or unset = all cores).
#[derive(Debug, Parser)]
#[command(name = "fbsde", version)]
struct Cli {
    /// JSON experiment config.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble size N.
    #[arg(long)]
    samples: Option<usize>,
    /// Number of iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Independent seeds to average over.
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Solve the Riccati equation, write `riccati.csv`, and exit.
    #[arg(long)]
    oracle_only: bool,
}

enum Failure {
    Config(String),
    Numerical(Error, PathBuf),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => experiment::load_config(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        (None, Some(Preset::MassSpring) | None) => ExperimentConfig::mass_spring(),
    };
    if let Some(seed) = cli.seed {
        cfg.solver.seed = seed;
    }
    if let Some(n) = cli.samples {
        cfg.solver.n_samples = n;
    }
    if let Some(k) = cli.iters {
        cfg.solver.n_iters = k;
    }
    if let Some(dt) = cli.dt {
        cfg.grid.dt = dt;
    }
    if let Some(r) = cli.repeats {
        cfg.n_repeats = r;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.trajectory_samples = cfg.trajectory_samples.min(cfg.solver.n_samples);
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), Failure> {
    let threads = match std::env::var("FBSDE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::Config(format!("FBSDE_THREADS: not a number: `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

fn oracle_only(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let prob = cfg.problem()?;
    let grid = cfg.time_grid()?;
    let numerical = |e: Error| Failure::Numerical(e, cfg.output_dir.clone());
    let ric = riccati_solve(&prob, &grid).map_err(numerical)?;
    let j_star = optimal_cost_oracle(&prob, &grid).map_err(numerical)?;
    let n = prob.state_dim();
    let mut csv = String::from("t");
    for i in 1..=n {
        for j in 1..=n {
            csv.push_str(&format!(",ric{i}{j}"));
        }
    }
    csv.push('\n');
    for (t, g) in grid.times().zip(&ric.g1) {
        csv.push_str(&format!("{t:.16e}"));
        for v in g.transpose().iter() {
            csv.push_str(&format!(",{v:.16e}"));
        }
        csv.push('\n');
    }
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Failure::Config(format!("{}: {e}", cfg.output_dir.display())))?;
    let path = cfg.output_dir.join("riccati.csv");
    fs::write(&path, csv).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    println!("G1(0) = {}", ric.g1[0]);
    println!("optimal cost J* = {j_star:.10}");
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    configure_threads()?;
    let cfg = build_config(cli)?;
    if cli.oracle_only {
        return oracle_only(&cfg);
    }
    let art = experiment::run_experiment(&cfg).map_err(|e| {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numerical(e, cfg.output_dir.clone())
        }
    })?;
    let s = &art.summary;
    println!("repeats: {}/{} succeeded", s.n_succeeded, s.n_repeats);
    for f in &s.failures {
        println!(
            "  repeat {} (seed {}) failed: {}",
            f.repeat, f.seed, f.error
        );
    }
    println!(
        "final cost {:.6}, optimal cost {:.6}",
        s.final_cost, s.optimal_cost
    );
    println!(
        "gain RMS vs Riccati: {:.5} overall, {:.5} worst entry",
        s.gain_rms, s.gain_rms_max_entry
    );
    println!("wall time {:.2}s", s.wall_time_secs);
    for p in [
        &art.gains_csv,
        &art.cost_csv,
        &art.trajectories_csv,
        &art.oracle_csv,
        &art.summary_json,
    ] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(err, dir)) => {
            eprintln!("numerical failure: {err}");
            match experiment::write_diagnostics(&dir, &err) {
                Ok(path) => eprintln!("diagnostics written to {}", path.display()),
                Err(e) => eprintln!("could not write diagnostics: {e}"),
            }
            ExitCode::from(3)
        }
    }
}
