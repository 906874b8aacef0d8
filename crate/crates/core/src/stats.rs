//! Empirical moments, the Gaussian Föllmer drift, and the per-time-step
//! regression of the adjoint on the state.
//!
//! All reductions run sequentially in sample order so results do not depend
//! on thread scheduling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Location, Result};
use crate::linalg::{spd_inverse, symmetrize};
use crate::sde::Ensemble;

/// Relative size of the ridge added before inverting a covariance.
pub const COVARIANCE_RIDGE: f64 = 1e-8;
/// Relative size of the ridge added to the regression normal matrix.
pub const REGRESSION_RIDGE: f64 = 1e-12;

/// Per-grid-point mean, covariance and regularized inverse covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSchedule {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    pub cov_inv: Vec<DMatrix<f64>>,
    /// Ridge `ε` used for each `cov_inv`.
    pub ridge: Vec<f64>,
}

impl MomentSchedule {
    /// Estimates moments of an ensemble at every grid point.
    pub fn estimate(states: &Ensemble) -> Result<Self> {
        let (mean, cov): (Vec<_>, Vec<_>) = (0..states.n_points())
            .map(|k| estimate_moments(states, k))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Self::from_moments(mean, cov)
    }

    /// Wraps known moments, e.g. the exact Gaussian ones.
    pub fn from_moments(mean: Vec<DVector<f64>>, cov: Vec<DMatrix<f64>>) -> Result<Self> {
        if mean.len() != cov.len() {
            return Err(Error::shape("MomentSchedule", mean.len(), cov.len()));
        }
        let mut cov_inv = Vec::with_capacity(cov.len());
        let mut ridge = Vec::with_capacity(cov.len());
        for (k, c) in cov.iter().enumerate() {
            ridge.push(ridge_for(c, COVARIANCE_RIDGE));
            cov_inv.push(regularized_inverse(c).map_err(|e| at_step(e, k))?);
        }
        Ok(Self {
            mean,
            cov,
            cov_inv,
            ridge,
        })
    }

    pub fn n_points(&self) -> usize {
        self.mean.len()
    }
}

fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::Singular { what, .. } => Error::Singular {
            what,
            location: Location::step(step),
        },
        other => other,
    }
}

/// Sample mean and covariance with `1/N` normalization at one grid point.
pub fn estimate_moments(states: &Ensemble, step: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n_samples = states.n_samples();
    if n_samples < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: n_samples,
        });
    }
    if step >= states.n_points() {
        return Err(Error::shape(
            "estimate_moments step",
            format!("< {}", states.n_points()),
            step,
        ));
    }
    let d = states.dim();
    let inv_n = 1.0 / n_samples as f64;
    let data = states.step(step);
    let mut mean = DVector::zeros(d);
    for x in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean *= inv_n;
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for x in data.chunks_exact(d) {
        for ((c, v), m) in centered.iter_mut().zip(x).zip(mean.iter()) {
            *c = v - m;
        }
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            cov[(i, j)] *= inv_n;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok((mean, cov))
}

/// `D Σ⁻¹ (x - m)`: the Föllmer drift of a Gaussian law `N(m, Σ)`.
pub fn follmer_drift_gaussian(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov_inv: &DMatrix<f64>,
    diffusion: &DMatrix<f64>,
) -> DVector<f64> {
    diffusion * (cov_inv * (x - mean))
}

fn ridge_for(m: &DMatrix<f64>, rel: f64) -> f64 {
    let n = m.nrows().max(1) as f64;
    rel * (m.trace() / n).max(1.0)
}

/// `(Σ + εI)⁻¹` with `ε = 1e-8 · max(Tr(Σ)/n, 1)`, symmetrized.
pub fn regularized_inverse(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::shape(
            "regularized_inverse",
            "square matrix",
            crate::linalg::dims(cov),
        ));
    }
    let mut m = cov.clone();
    symmetrize(&mut m);
    let eps = ridge_for(&m, COVARIANCE_RIDGE);
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    spd_inverse(&m, "regularized covariance", None)
}

/// Least-squares gain `argmin_G (1/N) Σ ‖yᵢ - G xᵢ‖²` without intercept.
pub fn fit_gain(states: &[DVector<f64>], adjoints: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if states.len() != adjoints.len() {
        return Err(Error::shape("fit_gain", states.len(), adjoints.len()));
    }
    let d = states.first().map_or(0, |x| x.len());
    if states.iter().chain(adjoints).any(|v| v.len() != d) {
        return Err(Error::shape(
            "fit_gain",
            format!("vectors of length {d}"),
            "mixed lengths",
        ));
    }
    let xs: Vec<f64> = states.iter().flat_map(|v| v.iter().copied()).collect();
    let ys: Vec<f64> = adjoints.iter().flat_map(|v| v.iter().copied()).collect();
    fit_gain_flat(&xs, &ys, d, None)
}

/// [`fit_gain`] on one grid point of a pair of ensembles.
pub fn fit_gain_at(states: &Ensemble, adjoints: &Ensemble, step: usize) -> Result<DMatrix<f64>> {
    if states.n_samples() != adjoints.n_samples() || states.dim() != adjoints.dim() {
        return Err(Error::shape(
            "fit_gain_at",
            format!("{} samples x {}", states.n_samples(), states.dim()),
            format!("{} samples x {}", adjoints.n_samples(), adjoints.dim()),
        ));
    }
    fit_gain_flat(
        states.step(step),
        adjoints.step(step),
        states.dim(),
        Some(step),
    )
}

/// Normal equations `G = C (M + εI)⁻¹` with `M = (1/N)Σ x xᵀ`, `C = (1/N)Σ y xᵀ`.
pub(crate) fn fit_gain_flat(
    xs: &[f64],
    ys: &[f64],
    d: usize,
    step: Option<usize>,
) -> Result<DMatrix<f64>> {
    let n_samples = xs.len().checked_div(d).unwrap_or(0);
    if d == 0 || n_samples < d {
        return Err(Error::TooFewSamples {
            needed: d.max(1),
            found: n_samples,
        });
    }
    let mut second = DMatrix::zeros(d, d);
    let mut cross = DMatrix::zeros(d, d);
    for (x, y) in xs.chunks_exact(d).zip(ys.chunks_exact(d)) {
        for i in 0..d {
            for j in 0..d {
                second[(i, j)] += x[i] * x[j];
                cross[(i, j)] += y[i] * x[j];
            }
        }
    }
    let inv_n = 1.0 / n_samples as f64;
    second *= inv_n;
    cross *= inv_n;
    let eps = ridge_for(&second, REGRESSION_RIDGE);
    for i in 0..d {
        second[(i, i)] += eps;
    }
    let singular = || Error::Singular {
        what: "regression normal matrix",
        location: Location { sample: None, step },
    };
    if second.iter().chain(cross.iter()).any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let chol = second.cholesky().ok_or_else(singular)?;
    // G M = C  ⇔  M Gᵀ = Cᵀ
    let gain = chol.solve(&cross.transpose()).transpose();
    if gain.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    Ok(gain)
}
