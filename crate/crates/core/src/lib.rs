//! Forward–backward SDE solver for linear-quadratic stochastic control by
//! time reversal of the controlled state.
//!
//! The optimal feedback of an LQ problem is `u = -R⁻¹BᵀG₁(t)x`, where `G₁`
//! solves a Riccati equation. Instead of solving that equation, this crate
//! simulates the state forward, reverses it in time with a Gaussian score
//! correction, integrates the adjoint backward along the reversed paths, and
//! recovers `G₁` by least-squares regression of the adjoint on the state. The
//! Riccati solution is provided as an oracle.
//!
//! ```no_run
//! use fbsde_core::{solve, LqProblem, SolverConfig, TimeGrid};
//!
//! let prob = LqProblem::mass_spring();
//! let grid = TimeGrid::new(1.0, 0.02)?;
//! let out = solve(&prob, &grid, &SolverConfig::mass_spring())?;
//! println!("G1(0) = {}", out.gains.g1[0]);
//! # Ok::<(), fbsde_core::Error>(())
//! ```

pub mod error;
pub mod experiment;
pub mod grid;
pub mod linalg;
pub mod lq;
pub mod rng;
pub mod sde;
pub mod solver;
pub mod stats;

pub use error::{Error, Location, Result};
pub use experiment::{
    compare_gains, compare_oracle, load_config, run_experiment, save_config, ExperimentConfig,
    OracleReport, RunArtifacts, RunSummary,
};
pub use grid::TimeGrid;
pub use lq::{
    affine_gain_odes, closed_loop_moments, cost_estimate, hamiltonian, hamiltonian_du,
    optimal_cost_oracle, optimal_feedback, riccati_solve, AffineControlLaw, GainSchedule, LqParams,
    LqProblem,
};
pub use sde::{
    backward_euler_step, backward_integral, forward_euler_step, reversal_transform, sample_wiener,
    Ensemble, WienerEnsemble,
};
pub use solver::{
    backward_pass, control_update, forward_pass, init, iterate, simulate_forward,
    simulate_reversed, solve, BackwardSweep, ControlPolicy, SolverConfig, SolverOutput,
    SolverState, TerminalSampling,
};
pub use stats::{
    estimate_moments, fit_gain, follmer_drift_gaussian, regularized_inverse, MomentSchedule,
};
