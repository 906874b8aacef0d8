//! Acceptance suite. Runs as a plain binary so every criterion prints its
//! own PASS/FAIL line; exits non-zero if any criterion fails.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use fbsde_core::experiment::ExperimentConfig;
use fbsde_core::rng::Purpose;
use fbsde_core::solver::gaussian_samples;
use fbsde_core::{
    backward_euler_step, closed_loop_moments, estimate_moments, fit_gain, forward_euler_step,
    hamiltonian, hamiltonian_du, init, optimal_cost_oracle, reversal_transform, riccati_solve,
    run_experiment, sample_wiener, simulate_forward, simulate_reversed, ControlPolicy, Ensemble,
    LqParams, LqProblem, MomentSchedule, SolverConfig, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = normal_mat(rng, n, n);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Mass-spring reproduction: gains against the Riccati solution (1) and the
/// cost curve (2), from one 10-seed run.
fn mass_spring_run() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = ExperimentConfig::mass_spring();
    cfg.output_dir = dir.path().to_path_buf();
    let start = Instant::now();
    let art = match run_experiment(&cfg) {
        Ok(a) => a,
        Err(e) => {
            let fail = || outcome(false, format!("run failed: {e}"));
            return (fail(), fail());
        }
    };
    let wall = start.elapsed().as_secs_f64();
    let max_rms = art.report.max_entry_rms;
    let c1 = outcome(
        max_rms <= 0.15 && wall <= 60.0 && art.summary.failures.is_empty(),
        format!(
            "max per-entry RMS {max_rms:.4} (limit 0.15), entries {:?}, wall time {wall:.2}s (limit 60s)",
            art.summary.gain_rms_per_entry.iter().flatten().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );

    let prob = cfg.problem().expect("preset problem");
    let grid = cfg.time_grid().expect("preset grid");
    let j_star = optimal_cost_oracle(&prob, &grid).expect("oracle cost");
    let mut worst_drop = f64::INFINITY;
    let mut worst_gap: f64 = 0.0;
    let mut finite = true;
    for r in 0..cfg.n_repeats {
        let hist: Vec<f64> = art
            .costs
            .iter()
            .filter(|c| c.repeat == r)
            .map(|c| c.cost)
            .collect();
        finite &= hist.len() == cfg.solver.n_iters && hist.iter().all(|c| c.is_finite());
        let (first, last) = (hist[0], hist[hist.len() - 1]);
        worst_drop = worst_drop.min((first - last) / first);
        worst_gap = worst_gap.max((last - j_star).abs() / j_star);
    }
    let c2 = outcome(
        finite && worst_drop >= 0.20 && worst_gap <= 0.10,
        format!(
            "all {} repeats: smallest decrease {:.1}% (limit 20%), largest |J_final - J*|/J* {:.2}% (limit 10%), J* = {j_star:.4}",
            cfg.n_repeats,
            100.0 * worst_drop,
            100.0 * worst_gap
        ),
    );
    (c1, c2)
}

fn riccati_tanh() -> Outcome {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let prob = LqProblem::new(LqParams {
        a: s(0.0),
        b: s(1.0),
        sigma: s(1.0),
        q: s(1.0),
        r: s(1.0),
        q_f: s(0.0),
        m0: DVector::zeros(1),
        sigma0: s(1.0),
        horizon: 1.0,
    })
    .expect("scalar problem");
    let grid = TimeGrid::new(1.0, 0.02).expect("grid");
    let g = riccati_solve(&prob, &grid).expect("riccati");
    let err = grid
        .times()
        .zip(&g.g1)
        .map(|(t, gk)| (gk[(0, 0)] - (1.0 - t).tanh()).abs())
        .fold(0.0, f64::max);
    outcome(
        err <= 1e-6,
        format!("max |G(t) - tanh(1-t)| = {err:.3e} (limit 1e-6)"),
    )
}

/// A backward-integrated SDE equals the forward SDE with negated drift driven
/// by the reversed increments, path by path.
fn reversal_pathwise() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for dim in [1usize, 2] {
        for instance in 0..100u64 {
            let a = normal_mat(&mut rng, dim, dim);
            let c = normal_vec(&mut rng, dim);
            let sigma = normal_mat(&mut rng, dim, dim);
            let drift = |x: &DVector<f64>| &a * x + c.component_mul(&x.map(f64::sin));
            let n_steps = rng.random_range(5..60);
            let dt = 1.0 / n_steps as f64;
            let grid = TimeGrid::new(1.0, dt).expect("grid");
            let paths = sample_wiener(&grid, dim, 1, 1000 + instance).expect("wiener");
            let rev = reversal_transform(&paths);
            let terminal = normal_vec(&mut rng, dim);

            let mut backward = vec![terminal.clone(); n_steps + 1];
            for k in (0..n_steps).rev() {
                let x = &backward[k + 1];
                let dw = DVector::from_column_slice(paths.increment(0, k));
                backward[k] = backward_euler_step(x, &drift(x), &sigma, &dw, dt).expect("step");
            }
            let mut z = terminal.clone();
            for j in 0..n_steps {
                let dw = DVector::from_column_slice(rev.increment(0, j));
                z = forward_euler_step(&z, &(-drift(&z)), &sigma, &dw, dt).expect("step");
                worst = worst.max((&z - &backward[n_steps - 1 - j]).amax());
            }
            count += 1;
        }
    }
    outcome(
        worst <= 1e-12,
        format!(
            "{count} instances (100 scalar, 100 2-D), max pathwise gap {worst:.3e} (limit 1e-12)"
        ),
    )
}

/// Zero control with exact moments: the reversed ensemble at t = 0 has the
/// initial law.
fn reversal_marginal() -> Outcome {
    let n = 10_000;
    let prob = LqProblem::mass_spring();
    let grid = TimeGrid::new(1.0, 0.02).expect("grid");
    let (means, covs) = closed_loop_moments(&prob, &grid, None).expect("moments");
    let moments = MomentSchedule::from_moments(means.clone(), covs.clone()).expect("schedule");
    let last = grid.n_steps();
    let terminal = gaussian_samples(&means[last], &covs[last], n, 7, Purpose::TerminalNormals)
        .expect("terminal");
    let noise = sample_wiener(&grid, 2, n, 7).expect("noise");
    let zero = Ensemble::for_grid(&grid, n, 1);
    let sweep = simulate_reversed(
        &prob,
        &grid,
        &moments,
        &terminal,
        &noise,
        ControlPolicy::Stored(&zero),
    )
    .expect("reversal");
    let (mean, cov) = estimate_moments(&sweep.states, 0).expect("estimate");
    let mean_err = (&mean - prob.m0()).norm() / prob.m0().norm().max(1.0);
    let cov_err = (&cov - prob.sigma0()).norm() / prob.sigma0().norm();
    let limit = 5.0 / (n as f64).sqrt();
    outcome(
        mean_err <= limit && cov_err <= limit,
        format!("mean error {mean_err:.4}, covariance error {cov_err:.4} (limit {limit:.3})"),
    )
}

/// Minimizes `Σ‖yᵢ - Gxᵢ‖²` one entry of `G` at a time until nothing moves.
fn coordinate_descent(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> DMatrix<f64> {
    let n = xs[0].len();
    let mut g = DMatrix::<f64>::zeros(n, n);
    for _ in 0..100_000 {
        let mut moved: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                let (mut num, mut den) = (0.0, 0.0);
                for (x, y) in xs.iter().zip(ys) {
                    let others: f64 = (0..n).filter(|&j| j != c).map(|j| g[(r, j)] * x[j]).sum();
                    num += (y[r] - others) * x[c];
                    den += x[c] * x[c];
                }
                let new = num / den;
                moved = moved.max((new - g[(r, c)]).abs());
                g[(r, c)] = new;
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    g
}

fn regression_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scale = normal_mat(&mut rng, 2, 2) + DMatrix::identity(2, 2);
        let truth = normal_mat(&mut rng, 2, 2);
        let xs: Vec<DVector<f64>> = (0..20).map(|_| &scale * normal_vec(&mut rng, 2)).collect();
        let ys: Vec<DVector<f64>> = xs
            .iter()
            .map(|x| &truth * x + normal_vec(&mut rng, 2) * 0.3)
            .collect();
        let fitted = fit_gain(&xs, &ys).expect("fit");
        let brute = coordinate_descent(&xs, &ys);
        worst = worst.max((fitted - brute).amax());
    }
    outcome(
        worst <= 1e-6,
        format!("50 instances, max |G_fit - G_brute| = {worst:.3e} (limit 1e-6)"),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let prob = LqProblem::new(LqParams {
            a: normal_mat(&mut rng, n, n),
            b: normal_mat(&mut rng, n, m),
            sigma: DMatrix::identity(n, n) + normal_mat(&mut rng, n, n) * 0.1,
            q: spd(&mut rng, n),
            r: spd(&mut rng, m),
            q_f: spd(&mut rng, n),
            m0: normal_vec(&mut rng, n),
            sigma0: spd(&mut rng, n),
            horizon: 1.0,
        })
        .expect("random problem");
        let (x, u, y, z) = (
            normal_vec(&mut rng, n),
            normal_vec(&mut rng, m),
            normal_vec(&mut rng, n),
            normal_mat(&mut rng, n, n),
        );
        let analytic = hamiltonian_du(&prob, &u, &y);
        let h = 1e-5;
        let fd = DVector::from_fn(m, |j, _| {
            let mut up = u.clone();
            let mut down = u.clone();
            up[j] += h;
            down[j] -= h;
            (hamiltonian(&prob, &x, &up, &y, &z) - hamiltonian(&prob, &x, &down, &y, &z))
                / (2.0 * h)
        });
        worst = worst.max((fd - &analytic).norm() / analytic.norm());
    }
    outcome(
        worst <= 1e-6,
        format!("100 inputs, max relative error {worst:.3e} (limit 1e-6)"),
    )
}

fn determinism() -> Outcome {
    let files = ["gains.csv", "cost.csv", "trajectories.csv", "oracle.csv"];
    let max_threads = std::thread::available_parallelism()
        .map_or(4, |n| n.get())
        .max(4);
    let run = |threads: usize| -> Result<Vec<Vec<u8>>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = ExperimentConfig::mass_spring();
        cfg.output_dir = dir.path().to_path_buf();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| run_experiment(&cfg))
            .map_err(|e| e.to_string())?;
        files
            .iter()
            .map(|f| fs::read(dir.path().join(f)).map_err(|e| e.to_string()))
            .collect()
    };
    match (run(max_threads), run(max_threads), run(1)) {
        (Ok(a), Ok(b), Ok(c)) => {
            let same = a == b && a == c;
            let bytes: usize = a.iter().map(Vec::len).sum();
            outcome(
                same,
                format!(
                    "{max_threads} threads twice and 1 thread: {} ({bytes} bytes compared per run)",
                    if same {
                        "byte-identical"
                    } else {
                        "outputs differ"
                    }
                ),
            )
        }
        (a, b, c) => outcome(
            false,
            format!("run failed: {:?}", [a.err(), b.err(), c.err()]),
        ),
    }
}

/// Frozen exact feedback: one backward sweep recovers the Riccati gains.
fn consistency_under_optimal_control() -> Outcome {
    let n = 10_000;
    let prob = LqProblem::mass_spring();
    let grid = TimeGrid::new(1.0, 0.02).expect("grid");
    let ric = riccati_solve(&prob, &grid).expect("riccati");
    let k = ric.feedback(&prob);
    let cfg = SolverConfig {
        n_samples: n,
        seed: 9,
        ..SolverConfig::mass_spring()
    };
    let state = init(&prob, &grid, &cfg).expect("init");
    let (forward, _) = simulate_forward(
        &prob,
        &grid,
        &state.initial,
        &state.forward_noise,
        ControlPolicy::Feedback(&k),
    )
    .expect("forward");
    let moments = MomentSchedule::estimate(&forward).expect("moments");
    let last = grid.n_steps();
    let terminal = gaussian_samples(
        &moments.mean[last],
        &moments.cov[last],
        n,
        cfg.seed,
        Purpose::TerminalNormals,
    )
    .expect("terminal");
    let sweep = simulate_reversed(
        &prob,
        &grid,
        &moments,
        &terminal,
        &state.reversed_noise,
        ControlPolicy::Feedback(&k),
    )
    .expect("reversal");
    let tol = 5.0 / (n as f64).sqrt();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_step = 0;
    for (step, (g, r)) in sweep.gains.g1.iter().zip(&ric.g1).enumerate() {
        let rms = (g - r).norm() / (r.len() as f64).sqrt();
        let ratio = rms / (tol * r.norm());
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_step = step;
        }
    }
    outcome(
        worst_ratio <= 1.0,
        format!(
            "worst grid point {worst_step}: RMS at {:.1}% of 5 N^(-1/2) ||G||_F",
            100.0 * worst_ratio
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let (c1, c2) = mass_spring_run();
    let results = [
        ("1 gains vs Riccati, mass-spring", c1),
        ("2 cost history, mass-spring", c2),
        ("3 Riccati oracle vs tanh", riccati_tanh()),
        ("4 pathwise time-reversal equivalence", reversal_pathwise()),
        ("5 reversed marginal law at t=0", reversal_marginal()),
        ("6 regression vs brute-force minimizer", regression_oracle()),
        (
            "7 Hamiltonian gradient vs finite differences",
            gradient_check(),
        ),
        ("8 determinism across thread counts", determinism()),
        (
            "9 reversal under exact optimal control",
            consistency_under_optimal_control(),
        ),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "criterion {name}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1}s)",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
