//! The iterative time-reversal solver.
//!
//! Each iteration simulates the controlled state forward, estimates the
//! Gaussian moments of the forward ensemble, simulates the time-reversed
//! state and adjoint backward from the terminal law while regressing the
//! adjoint on the state at every grid point, and takes a gradient step on
//! the stored per-sample controls.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};
use crate::grid::TimeGrid;
use crate::linalg::{matvec_add, matvec_into, psd_factor, vector_norm};
use crate::lq::{cost_estimate, GainSchedule, LqProblem};
use crate::rng::{self, Purpose};
use crate::sde::{sample_wiener_for, Ensemble, WienerEnsemble};
use crate::stats::{fit_gain_flat, MomentSchedule};

/// States whose norm exceeds this abort the run.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Samples per rayon work item in the per-sample loops.
const CHUNK: usize = 64;

/// How the terminal samples of the reversed state are produced each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalSampling {
    /// `m_T + L_T ξᵢ` with standard normals `ξᵢ` frozen per sample at init.
    #[default]
    FixedNormals,
    /// Independent normals for every iteration.
    Fresh,
    /// The forward ensemble's terminal states.
    ReuseForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub n_samples: usize,
    pub n_iters: usize,
    pub step_size: f64,
    pub seed: u64,
    #[serde(default)]
    pub record_history: bool,
    #[serde(default)]
    pub terminal_sampling: TerminalSampling,
}

impl SolverConfig {
    /// `N = 1000`, `k_f = 75`, `η = 0.02`.
    pub fn mass_spring() -> Self {
        Self {
            n_samples: 1000,
            n_iters: 75,
            step_size: 0.02,
            seed: 0,
            record_history: false,
            terminal_sampling: TerminalSampling::FixedNormals,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::config("solver.n_samples", "must be at least 2"));
        }
        if self.n_iters < 1 {
            return Err(Error::config("solver.n_iters", "must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::config(
                "solver.step_size",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Where the control applied at a grid point comes from.
#[derive(Debug, Clone, Copy)]
pub enum ControlPolicy<'a> {
    /// Per-sample, per-step stored values.
    Stored(&'a Ensemble),
    /// Linear state feedback `U = K(t_k) X`.
    Feedback(&'a [DMatrix<f64>]),
}

impl ControlPolicy<'_> {
    fn check(
        &self,
        context: &'static str,
        n_samples: usize,
        grid: &TimeGrid,
        m: usize,
        n: usize,
    ) -> Result<()> {
        match self {
            ControlPolicy::Stored(e) => e.check_shape(context, n_samples, grid.n_points(), m),
            ControlPolicy::Feedback(ks) => {
                if ks.len() != grid.n_points()
                    || ks.iter().any(|k| k.nrows() != m || k.ncols() != n)
                {
                    return Err(Error::shape(
                        context,
                        format!("{} feedback matrices {m}x{n}", grid.n_points()),
                        "mismatch",
                    ));
                }
                Ok(())
            }
        }
    }

    #[inline]
    fn write(&self, sample: usize, step: usize, x: &[f64], out: &mut [f64]) {
        match self {
            ControlPolicy::Stored(e) => out.copy_from_slice(e.at(sample, step)),
            ControlPolicy::Feedback(ks) => matvec_into(&ks[step], x, out),
        }
    }
}

/// Result of one backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSweep {
    pub states: Ensemble,
    pub adjoints: Ensemble,
    pub gains: GainSchedule,
}

/// All iterates of the algorithm.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub iter: usize,
    /// `X₀ⁱ`, shared by every forward pass (one grid point).
    pub initial: Ensemble,
    pub forward_noise: WienerEnsemble,
    pub reversed_noise: WienerEnsemble,
    /// Frozen standard normals for [`TerminalSampling::FixedNormals`] (one grid point).
    pub terminal_normals: Ensemble,
    pub forward_states: Ensemble,
    pub reversed_states: Ensemble,
    pub adjoints: Ensemble,
    pub forward_controls: Ensemble,
    pub reversed_controls: Ensemble,
    pub moments: Option<MomentSchedule>,
    pub gains: Option<GainSchedule>,
    pub cost_history: Vec<f64>,
    pub gain_history: Vec<GainSchedule>,
}

#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub gains: GainSchedule,
    /// Cost of the forward ensemble at each iteration, before its control update.
    pub cost_history: Vec<f64>,
    /// Gains after every iteration when `record_history` is set.
    pub gain_history: Vec<GainSchedule>,
    pub forward_states: Ensemble,
    pub forward_controls: Ensemble,
    pub reversed_states: Ensemble,
    pub adjoints: Ensemble,
    pub reversed_controls: Ensemble,
    pub config: SolverConfig,
    pub wall_time: Duration,
}

impl SolverOutput {
    /// Feedback matrices `-R⁻¹BᵀG₁(t)` of the final iterate.
    pub fn feedback(&self, prob: &LqProblem) -> Vec<DMatrix<f64>> {
        self.gains.feedback(prob)
    }
}

/// Draws `n` samples of `N(mean, cov)` as a one-point ensemble.
pub fn gaussian_samples(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    seed: u64,
    purpose: Purpose,
) -> Result<Ensemble> {
    let normals = standard_normals(mean.len(), n, seed, purpose);
    let factor = psd_factor(cov, "covariance", 1e-10 * cov.amax().max(1.0))?;
    Ok(affine_map(&normals, mean, &factor))
}

fn standard_normals(dim: usize, n: usize, seed: u64, purpose: Purpose) -> Ensemble {
    let mut out = Ensemble::zeros(n, 1, dim);
    out.step_mut(0)
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(i, x)| {
            let mut r = rng::stream(seed, purpose, i as u64);
            for v in x.iter_mut() {
                *v = r.sample(StandardNormal);
            }
        });
    out
}

fn affine_map(normals: &Ensemble, mean: &DVector<f64>, factor: &DMatrix<f64>) -> Ensemble {
    let d = normals.dim();
    let mut out = Ensemble::zeros(normals.n_samples(), 1, d);
    out.step_mut(0)
        .par_chunks_mut(d)
        .zip(normals.step(0).par_chunks(d))
        .for_each(|(x, z)| {
            x.copy_from_slice(mean.as_slice());
            matvec_add(factor, z, x);
        });
    out
}

fn check_step(values: &[f64], d: usize, step: usize, what: &'static str) -> Result<()> {
    for (i, x) in values.chunks_exact(d).enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what,
                location: Location::at(i, step),
            });
        }
        let norm = vector_norm(x);
        if norm > DIVERGENCE_BOUND {
            return Err(Error::Diverged {
                norm,
                location: Location::at(i, step),
            });
        }
    }
    Ok(())
}

/// Euler–Maruyama simulation of `dX = (AX + BU)dt + σdW` from the given
/// initial states. Returns the states and the controls actually applied.
pub fn simulate_forward(
    prob: &LqProblem,
    grid: &TimeGrid,
    initial: &Ensemble,
    noise: &WienerEnsemble,
    policy: ControlPolicy<'_>,
) -> Result<(Ensemble, Ensemble)> {
    let (n, m) = (prob.state_dim(), prob.control_dim());
    let n_samples = initial.n_samples();
    initial.check_shape("simulate_forward initial", n_samples, 1, n)?;
    if noise.n_samples() != n_samples || noise.n_steps() != grid.n_steps() || noise.dim() != n {
        return Err(Error::shape(
            "simulate_forward noise",
            format!("{n_samples} x {} x {n}", grid.n_steps()),
            "mismatch",
        ));
    }
    policy.check("simulate_forward controls", n_samples, grid, m, n)?;

    let dt = grid.dt();
    let mut states = Ensemble::for_grid(grid, n_samples, n);
    let mut controls = Ensemble::for_grid(grid, n_samples, m);
    states.step_mut(0).copy_from_slice(initial.step(0));
    check_step(states.step(0), n, 0, "initial state")?;

    for k in 0..=grid.n_steps() {
        {
            let x_k = states.step(k);
            controls
                .step_mut(k)
                .par_chunks_mut(m * CHUNK)
                .enumerate()
                .for_each(|(c, u_chunk)| {
                    for (j, u) in u_chunk.chunks_exact_mut(m).enumerate() {
                        let i = c * CHUNK + j;
                        policy.write(i, k, &x_k[i * n..(i + 1) * n], u);
                    }
                });
        }
        if k == grid.n_steps() {
            break;
        }
        let (cur, next) = states.step_pair_mut(k, k + 1);
        let u_k = controls.step(k);
        next.par_chunks_mut(n * CHUNK).enumerate().for_each_init(
            || vec![0.0; n],
            |drift, (c, next_chunk)| {
                for (j, out) in next_chunk.chunks_exact_mut(n).enumerate() {
                    let i = c * CHUNK + j;
                    let x = &cur[i * n..(i + 1) * n];
                    matvec_into(prob.a(), x, drift);
                    matvec_add(prob.b(), &u_k[i * m..(i + 1) * m], drift);
                    crate::sde::euler_forward_into(
                        x,
                        drift,
                        prob.sigma(),
                        noise.increment(i, k),
                        dt,
                        out,
                    );
                }
            },
        );
        check_step(states.step(k + 1), n, k + 1, "forward state")?;
    }
    Ok((states, controls))
}

/// Backward simulation of the time-reversed state and adjoint from terminal
/// samples, refitting `G₁` by regression at every grid point.
///
/// From `t_{k+1}` to `t_k`, with `b = DΣ⁻¹(X̌ - m)` and `G = G₁(t_{k+1})`:
///
/// ```text
/// X̌_k = X̌_{k+1} - (AX̌ + BǓ + b)Δt - σΔW̃_k
/// Y̌_k = Y̌_{k+1} + (AᵀY̌ + QX̌ - Gb)Δt - GσΔW̃_k
/// ```
///
/// with everything on the right evaluated at `t_{k+1}`.
pub fn simulate_reversed(
    prob: &LqProblem,
    grid: &TimeGrid,
    moments: &MomentSchedule,
    terminal: &Ensemble,
    noise: &WienerEnsemble,
    policy: ControlPolicy<'_>,
) -> Result<BackwardSweep> {
    let (n, m) = (prob.state_dim(), prob.control_dim());
    let n_samples = terminal.n_samples();
    let n_steps = grid.n_steps();
    terminal.check_shape("simulate_reversed terminal", n_samples, 1, n)?;
    if noise.n_samples() != n_samples || noise.n_steps() != n_steps || noise.dim() != n {
        return Err(Error::shape(
            "simulate_reversed noise",
            format!("{n_samples} x {n_steps} x {n}"),
            "mismatch",
        ));
    }
    if moments.n_points() != grid.n_points() {
        return Err(Error::shape(
            "simulate_reversed moments",
            grid.n_points(),
            moments.n_points(),
        ));
    }
    policy.check("simulate_reversed controls", n_samples, grid, m, n)?;

    let dt = grid.dt();
    let at = prob.a().transpose();
    let mut states = Ensemble::for_grid(grid, n_samples, n);
    let mut adjoints = Ensemble::for_grid(grid, n_samples, n);
    states.step_mut(n_steps).copy_from_slice(terminal.step(0));
    check_step(states.step(n_steps), n, n_steps, "terminal state")?;
    {
        let x_t = states.step(n_steps);
        adjoints
            .step_mut(n_steps)
            .par_chunks_mut(n * CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (j, y) in chunk.chunks_exact_mut(n).enumerate() {
                    let i = c * CHUNK + j;
                    matvec_into(prob.q_f(), &x_t[i * n..(i + 1) * n], y);
                }
            });
    }
    let mut g1 = vec![DMatrix::zeros(n, n); grid.n_points()];
    g1[n_steps] = fit_gain_flat(
        states.step(n_steps),
        adjoints.step(n_steps),
        n,
        Some(n_steps),
    )?;

    for k in (0..n_steps).rev() {
        let gain = &g1[k + 1];
        let gain_sigma = gain * prob.sigma();
        let score = prob.diffusion() * &moments.cov_inv[k + 1];
        let mean = moments.mean[k + 1].as_slice();
        let (x_prev, x_cur) = states.step_pair_mut(k, k + 1);
        let (y_prev, y_cur) = adjoints.step_pair_mut(k, k + 1);
        let (x_cur, y_cur) = (&*x_cur, &*y_cur);
        x_prev
            .par_chunks_mut(n * CHUNK)
            .zip(y_prev.par_chunks_mut(n * CHUNK))
            .enumerate()
            .for_each_init(
                || (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; m]),
                |(centered, b, drift, u), (c, (xp_chunk, yp_chunk))| {
                    for (j, (xp, yp)) in xp_chunk
                        .chunks_exact_mut(n)
                        .zip(yp_chunk.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let i = c * CHUNK + j;
                        let x = &x_cur[i * n..(i + 1) * n];
                        let y = &y_cur[i * n..(i + 1) * n];
                        let dw = noise.increment(i, k);
                        for ((cv, xv), mv) in centered.iter_mut().zip(x).zip(mean) {
                            *cv = xv - mv;
                        }
                        matvec_into(&score, centered, b);
                        policy.write(i, k + 1, x, u);

                        matvec_into(prob.a(), x, drift);
                        matvec_add(prob.b(), u, drift);
                        for (dv, bv) in drift.iter_mut().zip(b.iter()) {
                            *dv += bv;
                        }
                        crate::sde::euler_backward_into(x, drift, prob.sigma(), dw, dt, xp);

                        // adjoint drift AᵀY + QX - G b, entered with the opposite sign
                        matvec_into(&at, y, drift);
                        matvec_add(prob.q(), x, drift);
                        for (r, dv) in drift.iter_mut().enumerate() {
                            let mut gb = 0.0;
                            for (cidx, bv) in b.iter().enumerate() {
                                gb += gain[(r, cidx)] * bv;
                            }
                            *dv = -(*dv - gb);
                        }
                        crate::sde::euler_backward_into(y, drift, &gain_sigma, dw, dt, yp);
                    }
                },
            );
        check_step(states.step(k), n, k, "reversed state")?;
        check_step(adjoints.step(k), n, k, "adjoint")?;
        g1[k] = fit_gain_flat(states.step(k), adjoints.step(k), n, Some(k))?;
    }
    Ok(BackwardSweep {
        states,
        adjoints,
        gains: GainSchedule { g1, g2: None },
    })
}

/// `U ← U - η(RU + Bᵀy)` for every sample and grid point.
pub fn gradient_step(
    prob: &LqProblem,
    controls: &Ensemble,
    adjoints: &Ensemble,
    step_size: f64,
) -> Result<Ensemble> {
    let (n, m) = (prob.state_dim(), prob.control_dim());
    adjoints.check_shape(
        "gradient_step adjoints",
        controls.n_samples(),
        controls.n_points(),
        n,
    )?;
    controls.check_shape(
        "gradient_step controls",
        adjoints.n_samples(),
        adjoints.n_points(),
        m,
    )?;
    let bt = prob.b().transpose();
    let mut out = controls.clone();
    for k in 0..controls.n_points() {
        let y_k = adjoints.step(k);
        out.step_mut(k)
            .par_chunks_mut(m * CHUNK)
            .enumerate()
            .for_each_init(
                || vec![0.0; m],
                |grad, (c, chunk)| {
                    for (j, u) in chunk.chunks_exact_mut(m).enumerate() {
                        let i = c * CHUNK + j;
                        matvec_into(prob.r(), u, grad);
                        matvec_add(&bt, &y_k[i * n..(i + 1) * n], grad);
                        for (uv, gv) in u.iter_mut().zip(grad.iter()) {
                            *uv -= step_size * gv;
                        }
                    }
                },
            );
    }
    Ok(out)
}

/// `Yᵢ(t_k) = G₁(t_k) Xᵢ(t_k)`.
pub fn adjoint_from_gains(gains: &GainSchedule, states: &Ensemble) -> Result<Ensemble> {
    let n = states.dim();
    if gains.n_points() != states.n_points()
        || gains.g1.iter().any(|g| g.nrows() != n || g.ncols() != n)
    {
        return Err(Error::shape(
            "adjoint_from_gains",
            states.n_points(),
            gains.n_points(),
        ));
    }
    let mut out = Ensemble::zeros(states.n_samples(), states.n_points(), n);
    for k in 0..states.n_points() {
        let x_k = states.step(k);
        let g = &gains.g1[k];
        out.step_mut(k)
            .par_chunks_mut(n)
            .zip(x_k.par_chunks(n))
            .for_each(|(y, x)| matvec_into(g, x, y));
    }
    Ok(out)
}

/// Draws `X₀`, the Wiener increments and the terminal normals; controls start at zero.
pub fn init(prob: &LqProblem, grid: &TimeGrid, cfg: &SolverConfig) -> Result<SolverState> {
    cfg.validate()?;
    if (grid.horizon() - prob.horizon()).abs() > 1e-12 * prob.horizon() {
        return Err(Error::config(
            "grid.horizon",
            "differs from the problem horizon",
        ));
    }
    let (n, m, big_n) = (prob.state_dim(), prob.control_dim(), cfg.n_samples);
    let factor = psd_factor(prob.sigma0(), "sigma0", 1e-10)?;
    let initial = affine_map(
        &standard_normals(n, big_n, cfg.seed, Purpose::InitialState),
        prob.m0(),
        &factor,
    );
    let forward_noise = sample_wiener_for(grid, n, big_n, cfg.seed, Purpose::ForwardNoise)?;
    let reversed_noise = sample_wiener_for(grid, n, big_n, cfg.seed, Purpose::ReversedNoise)?;
    let terminal_normals = standard_normals(n, big_n, cfg.seed, Purpose::TerminalNormals);
    Ok(SolverState {
        iter: 0,
        initial,
        forward_noise,
        reversed_noise,
        terminal_normals,
        forward_states: Ensemble::for_grid(grid, big_n, n),
        reversed_states: Ensemble::for_grid(grid, big_n, n),
        adjoints: Ensemble::for_grid(grid, big_n, n),
        forward_controls: Ensemble::for_grid(grid, big_n, m),
        reversed_controls: Ensemble::for_grid(grid, big_n, m),
        moments: None,
        gains: None,
        cost_history: Vec::with_capacity(cfg.n_iters),
        gain_history: Vec::new(),
    })
}

/// Forward simulation with the stored controls of the previous iteration.
pub fn forward_pass(state: &SolverState, prob: &LqProblem, grid: &TimeGrid) -> Result<Ensemble> {
    let (states, _) = simulate_forward(
        prob,
        grid,
        &state.initial,
        &state.forward_noise,
        ControlPolicy::Stored(&state.forward_controls),
    )?;
    Ok(states)
}

/// Terminal samples of the reversed state for the current iteration.
pub fn terminal_samples(state: &SolverState, cfg: &SolverConfig) -> Result<Ensemble> {
    let moments = state
        .moments
        .as_ref()
        .ok_or_else(|| Error::config("solver", "moments not estimated yet"))?;
    let last = moments.n_points() - 1;
    let (mean, cov) = (&moments.mean[last], &moments.cov[last]);
    let factor = || psd_factor(cov, "terminal covariance", 1e-8 * cov.amax().max(1.0));
    match cfg.terminal_sampling {
        TerminalSampling::FixedNormals => Ok(affine_map(&state.terminal_normals, mean, &factor()?)),
        TerminalSampling::Fresh => {
            let normals = standard_normals(
                mean.len(),
                cfg.n_samples,
                cfg.seed,
                Purpose::TerminalIteration(state.iter as u64),
            );
            Ok(affine_map(&normals, mean, &factor()?))
        }
        TerminalSampling::ReuseForward => {
            let fwd = &state.forward_states;
            let mut out = Ensemble::zeros(fwd.n_samples(), 1, fwd.dim());
            out.step_mut(0)
                .copy_from_slice(fwd.step(fwd.n_points() - 1));
            Ok(out)
        }
    }
}

/// Backward sweep using the current moments and stored reversed controls.
pub fn backward_pass(
    state: &SolverState,
    prob: &LqProblem,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<BackwardSweep> {
    let moments = state
        .moments
        .as_ref()
        .ok_or_else(|| Error::config("solver", "moments not estimated yet"))?;
    let terminal = terminal_samples(state, cfg)?;
    simulate_reversed(
        prob,
        grid,
        moments,
        &terminal,
        &state.reversed_noise,
        ControlPolicy::Stored(&state.reversed_controls),
    )
}

/// Gradient step on both control ensembles: forward controls use
/// `Y = G₁(t)X` on the forward paths, reversed controls use `Y̌` directly.
pub fn control_update(state: &mut SolverState, prob: &LqProblem, step_size: f64) -> Result<()> {
    let gains = state
        .gains
        .as_ref()
        .ok_or_else(|| Error::config("solver", "gains not fitted yet"))?;
    let forward_adjoints = adjoint_from_gains(gains, &state.forward_states)?;
    state.forward_controls =
        gradient_step(prob, &state.forward_controls, &forward_adjoints, step_size)?;
    state.reversed_controls =
        gradient_step(prob, &state.reversed_controls, &state.adjoints, step_size)?;
    Ok(())
}

/// One full iteration; appends the cost of the forward ensemble.
pub fn iterate(
    state: &mut SolverState,
    prob: &LqProblem,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<()> {
    state.iter += 1;
    let forward = forward_pass(state, prob, grid)?;
    let cost = cost_estimate(prob, &forward, &state.forward_controls, grid)?;
    state.moments = Some(MomentSchedule::estimate(&forward)?);
    state.forward_states = forward;
    let sweep = backward_pass(state, prob, grid, cfg)?;
    state.reversed_states = sweep.states;
    state.adjoints = sweep.adjoints;
    state.gains = Some(sweep.gains);
    control_update(state, prob, cfg.step_size)?;
    state.cost_history.push(cost);
    if cfg.record_history {
        state
            .gain_history
            .push(state.gains.clone().expect("gains set above"));
    }
    Ok(())
}

/// Runs `init` and then `n_iters` iterations.
pub fn solve(prob: &LqProblem, grid: &TimeGrid, cfg: &SolverConfig) -> Result<SolverOutput> {
    let start = Instant::now();
    let mut state = init(prob, grid, cfg)?;
    for it in 1..=cfg.n_iters {
        iterate(&mut state, prob, grid, cfg).map_err(|e| Error::Iteration {
            iteration: it,
            source: Box::new(e),
        })?;
    }
    Ok(SolverOutput {
        gains: state.gains.expect("at least one iteration ran"),
        cost_history: state.cost_history,
        gain_history: state.gain_history,
        forward_states: state.forward_states,
        forward_controls: state.forward_controls,
        reversed_states: state.reversed_states,
        adjoints: state.adjoints,
        reversed_controls: state.reversed_controls,
        config: cfg.clone(),
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq::{riccati_solve, LqParams};
    use approx::assert_relative_eq;

    fn scalar(a: f64, b: f64, sigma: f64, sigma0: f64) -> LqProblem {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LqProblem::new(LqParams {
            a: m(a),
            b: m(b),
            sigma: m(sigma),
            q: m(1.0),
            r: m(1.0),
            q_f: m(1.0),
            m0: DVector::from_element(1, 1.0),
            sigma0: m(sigma0),
            horizon: 1.0,
        })
        .unwrap()
    }

    fn small_cfg(n: usize, iters: usize) -> SolverConfig {
        SolverConfig {
            n_samples: n,
            n_iters: iters,
            step_size: 0.02,
            seed: 17,
            ..SolverConfig::mass_spring()
        }
    }

    #[test]
    fn init_draws_and_zero_controls() {
        let grid = TimeGrid::new(1.0, 0.02).unwrap();
        let prob = LqProblem::mass_spring();
        let state = init(&prob, &grid, &SolverConfig::mass_spring()).unwrap();
        assert!(state.forward_controls.values().iter().all(|&u| u == 0.0));
        assert!(state.reversed_controls.values().iter().all(|&u| u == 0.0));
        let n = 1000.0f64;
        let (mean, _) = crate::stats::estimate_moments(&state.initial, 0).unwrap();
        assert!(mean.iter().all(|m| m.abs() <= 4.0 / n.sqrt()), "{mean}");
    }

    #[test]
    fn init_with_singular_sigma0() {
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let prob = scalar(0.0, 1.0, 1.0, 0.0);
        let state = init(&prob, &grid, &small_cfg(10, 1)).unwrap();
        assert!(state.initial.values().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn config_validation() {
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let prob = LqProblem::mass_spring();
        for cfg in [
            SolverConfig {
                n_samples: 1,
                ..small_cfg(10, 1)
            },
            SolverConfig {
                n_iters: 0,
                ..small_cfg(10, 1)
            },
            SolverConfig {
                step_size: f64::NAN,
                ..small_cfg(10, 1)
            },
        ] {
            assert!(matches!(
                init(&prob, &grid, &cfg),
                Err(Error::InvalidConfig { .. })
            ));
        }
    }

    #[test]
    fn forward_pass_special_cases() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        // A = 0, B = 0 (B must be nonzero-dimensional but may vanish), σ small is not
        // allowed to be zero, so the noiseless case uses zero increments instead.
        let prob = scalar(0.0, 0.0, 1.0, 1.0);
        let initial = Ensemble::from_fn(3, 1, 1, |i, _| vec![i as f64]);
        let zero_noise = WienerEnsemble::from_increments(3, 10, 1, 0.1, vec![0.0; 30]).unwrap();
        let controls = Ensemble::for_grid(&grid, 3, 1);
        let (x, _) = simulate_forward(
            &prob,
            &grid,
            &initial,
            &zero_noise,
            ControlPolicy::Stored(&controls),
        )
        .unwrap();
        for k in 0..=10 {
            for i in 0..3 {
                assert_eq!(x.at(i, k)[0], i as f64);
            }
        }
        let noise = sample_wiener_for(&grid, 1, 3, 4, Purpose::ForwardNoise).unwrap();
        let (x, _) = simulate_forward(
            &prob,
            &grid,
            &initial,
            &noise,
            ControlPolicy::Stored(&controls),
        )
        .unwrap();
        for i in 0..3 {
            let mut w = i as f64;
            for k in 0..10 {
                w += noise.increment(i, k)[0];
                assert_eq!(x.at(i, k + 1)[0], w);
            }
        }
        let growth = scalar(1.0, 0.0, 1.0, 1.0);
        let one = Ensemble::from_fn(1, 1, 1, |_, _| vec![1.0]);
        let z1 = WienerEnsemble::from_increments(1, 10, 1, 0.1, vec![0.0; 10]).unwrap();
        let c1 = Ensemble::for_grid(&grid, 1, 1);
        let (x, _) =
            simulate_forward(&growth, &grid, &one, &z1, ControlPolicy::Stored(&c1)).unwrap();
        for k in 0..=10 {
            assert_relative_eq!(x.at(0, k)[0], 1.1f64.powi(k as i32), max_relative = 1e-14);
        }
    }

    #[test]
    fn forward_pass_reports_divergence() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let prob = scalar(1000.0, 0.0, 1.0, 1.0);
        let one = Ensemble::from_fn(2, 1, 1, |_, _| vec![1.0]);
        let z = WienerEnsemble::from_increments(2, 10, 1, 0.1, vec![0.0; 20]).unwrap();
        let c = Ensemble::for_grid(&grid, 2, 1);
        let err = simulate_forward(&prob, &grid, &one, &z, ControlPolicy::Stored(&c)).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Diverged {
                    location: Location {
                        sample: Some(0),
                        step: Some(3)
                    },
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn single_backward_step_hand_example() {
        // A = 0, Q = 0, Ǔ = 0, σ = D = Σ = 1, m = 0, G = 0.5, X̌_T = 2, ΔW̃ = 0.1, Δt = 0.1
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let prob = LqProblem::new(LqParams {
            a: m(0.0),
            b: m(1.0),
            sigma: m(1.0),
            q: m(0.0),
            r: m(1.0),
            q_f: m(0.5),
            m0: DVector::zeros(1),
            sigma0: m(1.0),
            horizon: 0.1,
        })
        .unwrap();
        let grid = TimeGrid::new(0.1, 0.1).unwrap();
        let moments =
            MomentSchedule::from_moments(vec![DVector::zeros(1); 2], vec![m(1.0); 2]).unwrap();
        // identity inverse to the ridge's precision; build the schedule by hand for exactness
        let moments = MomentSchedule {
            cov_inv: vec![m(1.0); 2],
            ..moments
        };
        let terminal = Ensemble::from_fn(2, 1, 1, |i, _| vec![if i == 0 { 2.0 } else { -1.0 }]);
        let noise = WienerEnsemble::from_increments(2, 1, 1, 0.1, vec![0.1, 0.0]).unwrap();
        let controls = Ensemble::for_grid(&grid, 2, 1);
        let sweep = simulate_reversed(
            &prob,
            &grid,
            &moments,
            &terminal,
            &noise,
            ControlPolicy::Stored(&controls),
        )
        .unwrap();
        assert_relative_eq!(sweep.gains.g1[1][(0, 0)], 0.5, epsilon = 1e-10);
        assert_eq!(sweep.adjoints.at(0, 1)[0], 1.0);
        assert_relative_eq!(sweep.states.at(0, 0)[0], 1.7, epsilon = 1e-10);
        assert_relative_eq!(sweep.adjoints.at(0, 0)[0], 0.85, epsilon = 1e-10);
    }

    #[test]
    fn control_update_examples() {
        let prob = LqProblem::mass_spring();
        let controls = Ensemble::zeros(1, 1, 1);
        let y = Ensemble::from_fn(1, 1, 2, |_, _| vec![1.0, 2.0]);
        assert_relative_eq!(
            gradient_step(&prob, &controls, &y, 0.02).unwrap().at(0, 0)[0],
            -0.04,
            epsilon = 1e-15
        );
        let arbitrary = Ensemble::from_fn(1, 1, 1, |_, _| vec![0.7]);
        assert_eq!(
            gradient_step(&prob, &arbitrary, &y, 0.0).unwrap(),
            arbitrary
        );
        let optimal = Ensemble::from_fn(1, 1, 1, |_, _| vec![-2.0]);
        let after = gradient_step(&prob, &optimal, &y, 0.02).unwrap();
        assert!((after.at(0, 0)[0] + 2.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_step_single_iteration() {
        let grid = TimeGrid::new(1.0, 0.05).unwrap();
        let prob = LqProblem::mass_spring();
        let cfg = SolverConfig {
            step_size: 0.0,
            ..small_cfg(200, 1)
        };
        let out = solve(&prob, &grid, &cfg).unwrap();
        assert_eq!(out.cost_history.len(), 1);
        assert!(out.forward_controls.values().iter().all(|&u| u == 0.0));

        let state = init(&prob, &grid, &cfg).unwrap();
        let zero = Ensemble::for_grid(&grid, 200, 1);
        let (x, _) = simulate_forward(
            &prob,
            &grid,
            &state.initial,
            &state.forward_noise,
            ControlPolicy::Stored(&zero),
        )
        .unwrap();
        assert_eq!(
            out.cost_history[0],
            cost_estimate(&prob, &x, &zero, &grid).unwrap()
        );
        let moments = MomentSchedule::estimate(&x).unwrap();
        let last = grid.n_steps();
        let factor = psd_factor(&moments.cov[last], "t", 1e-8).unwrap();
        let terminal = affine_map(&state.terminal_normals, &moments.mean[last], &factor);
        let sweep = simulate_reversed(
            &prob,
            &grid,
            &moments,
            &terminal,
            &state.reversed_noise,
            ControlPolicy::Stored(&zero),
        )
        .unwrap();
        assert_eq!(sweep.gains, out.gains);
    }

    #[test]
    fn solve_is_deterministic() {
        let grid = TimeGrid::new(1.0, 0.05).unwrap();
        let prob = LqProblem::mass_spring();
        for sampling in [
            TerminalSampling::FixedNormals,
            TerminalSampling::Fresh,
            TerminalSampling::ReuseForward,
        ] {
            let cfg = SolverConfig {
                terminal_sampling: sampling,
                record_history: true,
                ..small_cfg(100, 4)
            };
            let a = solve(&prob, &grid, &cfg).unwrap();
            let b = solve(&prob, &grid, &cfg).unwrap();
            assert_eq!(a.gains, b.gains);
            assert_eq!(a.cost_history, b.cost_history);
            assert_eq!(a.gain_history, b.gain_history);
            assert_eq!(a.gain_history.len(), 4);
            assert_eq!(a.forward_controls, b.forward_controls);
            assert_eq!(a.reversed_states, b.reversed_states);
        }
    }

    #[test]
    fn terminal_regression_recovers_q_f() {
        let grid = TimeGrid::new(1.0, 0.05).unwrap();
        let prob = LqProblem::mass_spring();
        let cfg = SolverConfig {
            record_history: true,
            ..small_cfg(300, 5)
        };
        let out = solve(&prob, &grid, &cfg).unwrap();
        for gains in &out.gain_history {
            assert!((&gains.g1[grid.n_steps()] - prob.q_f()).amax() <= 1e-8);
        }
    }

    #[test]
    fn near_deterministic_feedback_recovers_riccati() {
        // tiny noise: regression on almost exactly linear data
        let mut p = LqProblem::mass_spring().params().clone();
        p.sigma = DMatrix::identity(2, 2) * 1e-3;
        let prob = LqProblem::new(p).unwrap();
        let grid = TimeGrid::new(1.0, 0.02).unwrap();
        let ric = riccati_solve(&prob, &grid).unwrap();
        let k = ric.feedback(&prob);
        let cfg = small_cfg(500, 1);
        let state = init(&prob, &grid, &cfg).unwrap();
        let (x, _) = simulate_forward(
            &prob,
            &grid,
            &state.initial,
            &state.forward_noise,
            ControlPolicy::Feedback(&k),
        )
        .unwrap();
        let moments = MomentSchedule::estimate(&x).unwrap();
        let last = grid.n_steps();
        let factor = psd_factor(&moments.cov[last], "t", 1e-8).unwrap();
        let terminal = affine_map(&state.terminal_normals, &moments.mean[last], &factor);
        let sweep = simulate_reversed(
            &prob,
            &grid,
            &moments,
            &terminal,
            &state.reversed_noise,
            ControlPolicy::Feedback(&k),
        )
        .unwrap();
        let report = crate::experiment::compare_gains(&sweep.gains.g1, &ric, &grid);
        assert!(report.rms <= 0.02, "rms {}", report.rms);
    }
}
