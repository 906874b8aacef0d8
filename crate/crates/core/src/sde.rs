//! Ensembles of sample paths, Brownian increments, and Euler–Maruyama steps
//! in both time directions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Location, Result};
use crate::grid::TimeGrid;
use crate::linalg::dims;
use crate::rng::{self, Purpose};

/// `N` sample trajectories of a `dim`-dimensional process on a grid.
///
/// Logically indexed `(sample, step, coordinate)`. Storage is step-major so
/// the per-time-step reductions (moments, regression) read contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    values: Vec<f64>,
    n_samples: usize,
    n_points: usize,
    dim: usize,
}

impl Ensemble {
    pub fn zeros(n_samples: usize, n_points: usize, dim: usize) -> Self {
        Self {
            values: vec![0.0; n_samples * n_points * dim],
            n_samples,
            n_points,
            dim,
        }
    }

    pub fn for_grid(grid: &TimeGrid, n_samples: usize, dim: usize) -> Self {
        Self::zeros(n_samples, grid.n_points(), dim)
    }

    /// Builds an ensemble where `f(sample, step)` yields the state vector.
    pub fn from_fn<F>(n_samples: usize, n_points: usize, dim: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut e = Self::zeros(n_samples, n_points, dim);
        for k in 0..n_points {
            for i in 0..n_samples {
                let v = f(i, k);
                assert_eq!(v.len(), dim, "Ensemble::from_fn: wrong vector length");
                e.at_mut(i, k).copy_from_slice(&v);
            }
        }
        e
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_steps(&self) -> usize {
        self.n_points.saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, sample: usize, step: usize) -> usize {
        (step * self.n_samples + sample) * self.dim
    }

    #[inline]
    pub fn at(&self, sample: usize, step: usize) -> &[f64] {
        let o = self.offset(sample, step);
        &self.values[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, sample: usize, step: usize) -> &mut [f64] {
        let o = self.offset(sample, step);
        &mut self.values[o..o + self.dim]
    }

    /// All samples at one grid point, `n_samples * dim` values, sample-major.
    pub fn step(&self, step: usize) -> &[f64] {
        let len = self.n_samples * self.dim;
        &self.values[step * len..(step + 1) * len]
    }

    pub fn step_mut(&mut self, step: usize) -> &mut [f64] {
        let len = self.n_samples * self.dim;
        &mut self.values[step * len..(step + 1) * len]
    }

    /// Mutable views of two distinct grid points, `(earlier, later)`.
    pub(crate) fn step_pair_mut(
        &mut self,
        earlier: usize,
        later: usize,
    ) -> (&mut [f64], &mut [f64]) {
        assert!(earlier < later);
        let len = self.n_samples * self.dim;
        let (head, tail) = self.values.split_at_mut(later * len);
        (
            &mut head[earlier * len..(earlier + 1) * len],
            &mut tail[..len],
        )
    }

    pub fn vector(&self, sample: usize, step: usize) -> DVector<f64> {
        DVector::from_column_slice(self.at(sample, step))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn first_non_finite(&self) -> Option<Location> {
        let pos = self.values.iter().position(|v| !v.is_finite())?;
        let cell = pos / self.dim;
        Some(Location::at(cell % self.n_samples, cell / self.n_samples))
    }

    pub(crate) fn check_shape(
        &self,
        context: &'static str,
        n_samples: usize,
        n_points: usize,
        dim: usize,
    ) -> Result<()> {
        if self.n_samples != n_samples || self.n_points != n_points || self.dim != dim {
            return Err(Error::shape(
                context,
                format!("{n_samples} samples x {n_points} points x {dim}"),
                format!(
                    "{} samples x {} points x {}",
                    self.n_samples, self.n_points, self.dim
                ),
            ));
        }
        Ok(())
    }
}

/// Per-sample Brownian increments `ΔW_k = W_{t_{k+1}} - W_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerEnsemble {
    increments: Vec<f64>,
    n_samples: usize,
    n_steps: usize,
    dim: usize,
    dt: f64,
    seed: Option<u64>,
}

impl WienerEnsemble {
    /// Wraps precomputed increments laid out `(sample, step, coordinate)`.
    pub fn from_increments(
        n_samples: usize,
        n_steps: usize,
        dim: usize,
        dt: f64,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if increments.len() != n_samples * n_steps * dim {
            return Err(Error::shape(
                "WienerEnsemble::from_increments",
                n_samples * n_steps * dim,
                increments.len(),
            ));
        }
        Ok(Self {
            increments,
            n_samples,
            n_steps,
            dim,
            dt,
            seed: None,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Master seed, if the increments were generated by [`sample_wiener`].
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    #[inline]
    pub fn increment(&self, sample: usize, step: usize) -> &[f64] {
        let o = (sample * self.n_steps + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `W_{t_k}` for one sample, with `W_0 = 0`.
    pub fn path_value(&self, sample: usize, step: usize) -> DVector<f64> {
        let mut w = DVector::zeros(self.dim);
        for k in 0..step {
            for (wj, dj) in w.iter_mut().zip(self.increment(sample, k)) {
                *wj += dj;
            }
        }
        w
    }
}

/// Draws i.i.d. `N(0, dt)` increments, one ChaCha stream per sample.
pub fn sample_wiener(
    grid: &TimeGrid,
    dim: usize,
    n_samples: usize,
    seed: u64,
) -> Result<WienerEnsemble> {
    sample_wiener_for(grid, dim, n_samples, seed, Purpose::ForwardNoise)
}

pub(crate) fn sample_wiener_for(
    grid: &TimeGrid,
    dim: usize,
    n_samples: usize,
    seed: u64,
    purpose: Purpose,
) -> Result<WienerEnsemble> {
    if dim == 0 {
        return Err(Error::shape("sample_wiener", "dim >= 1", dim));
    }
    if n_samples == 0 {
        return Err(Error::TooFewSamples {
            needed: 1,
            found: 0,
        });
    }
    let n_steps = grid.n_steps();
    let scale = grid.dt().sqrt();
    let mut increments = vec![0.0; n_samples * n_steps * dim];
    increments
        .par_chunks_mut(n_steps * dim)
        .enumerate()
        .for_each(|(i, chunk)| {
            let mut rng = rng::stream(seed, purpose, i as u64);
            for v in chunk.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
        });
    Ok(WienerEnsemble {
        increments,
        n_samples,
        n_steps,
        dim,
        dt: grid.dt(),
        seed: Some(seed),
    })
}

/// Increments of `W̃_t = W_{T-t} - W_T`: step `k` of the output is minus
/// step `n_steps - 1 - k` of the input.
pub fn reversal_transform(paths: &WienerEnsemble) -> WienerEnsemble {
    let mut out = paths.clone();
    out.seed = None;
    let n = paths.n_steps;
    let d = paths.dim;
    for i in 0..paths.n_samples {
        for k in 0..n {
            let src = paths.increment(i, n - 1 - k);
            let o = (i * n + k) * d;
            for (dst, s) in out.increments[o..o + d].iter_mut().zip(src) {
                *dst = -s;
            }
        }
    }
    out
}

/// Right-endpoint Riemann sum `Σ_{k=from}^{n-1} V_{t_{k+1}} ⊙ ΔW_k` per sample.
///
/// The integrand is either scalar (`dim == 1`, broadcast over the noise
/// coordinates) or has the noise dimension (coordinatewise product).
pub fn backward_integral(
    integrand: &Ensemble,
    paths: &WienerEnsemble,
    from_step: usize,
) -> Result<Vec<DVector<f64>>> {
    let n = paths.n_steps();
    if integrand.n_samples() != paths.n_samples() || integrand.n_points() != n + 1 {
        return Err(Error::shape(
            "backward_integral",
            format!("{} samples x {} points", paths.n_samples(), n + 1),
            format!(
                "{} samples x {} points",
                integrand.n_samples(),
                integrand.n_points()
            ),
        ));
    }
    if integrand.dim() != 1 && integrand.dim() != paths.dim() {
        return Err(Error::shape(
            "backward_integral",
            format!("integrand dim 1 or {}", paths.dim()),
            integrand.dim(),
        ));
    }
    if from_step > n {
        return Err(Error::shape(
            "backward_integral",
            format!("from_step <= {n}"),
            from_step,
        ));
    }
    let d = paths.dim();
    Ok((0..paths.n_samples())
        .map(|i| {
            let mut acc = DVector::zeros(d);
            for k in from_step..n {
                let v = integrand.at(i, k + 1);
                let dw = paths.increment(i, k);
                for j in 0..d {
                    let vj = if v.len() == 1 { v[0] } else { v[j] };
                    acc[j] += vj * dw[j];
                }
            }
            acc
        })
        .collect())
}

fn check_step_shapes(
    x: &DVector<f64>,
    drift: &DVector<f64>,
    sigma: &DMatrix<f64>,
    dw: &DVector<f64>,
) -> Result<()> {
    let n = x.len();
    if drift.len() != n {
        return Err(Error::shape("euler step drift", n, drift.len()));
    }
    if sigma.nrows() != n || sigma.ncols() != dw.len() {
        return Err(Error::shape(
            "euler step sigma",
            format!("{n}x{}", dw.len()),
            dims(sigma),
        ));
    }
    Ok(())
}

#[inline]
fn noise_term(sigma: &DMatrix<f64>, dw: &[f64], row: usize) -> f64 {
    let mut acc = 0.0;
    for (c, w) in dw.iter().enumerate() {
        acc += sigma[(row, c)] * w;
    }
    acc
}

/// Slice kernel behind [`forward_euler_step`].
#[inline]
pub(crate) fn euler_forward_into(
    x: &[f64],
    drift: &[f64],
    sigma: &DMatrix<f64>,
    dw: &[f64],
    dt: f64,
    out: &mut [f64],
) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = x[j] + drift[j] * dt + noise_term(sigma, dw, j);
    }
}

/// Slice kernel behind [`backward_euler_step`].
#[inline]
pub(crate) fn euler_backward_into(
    x: &[f64],
    drift: &[f64],
    sigma: &DMatrix<f64>,
    dw: &[f64],
    dt: f64,
    out: &mut [f64],
) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = x[j] - drift[j] * dt - noise_term(sigma, dw, j);
    }
}

/// `x + drift·dt + sigma·dW`.
pub fn forward_euler_step(
    x: &DVector<f64>,
    drift: &DVector<f64>,
    sigma: &DMatrix<f64>,
    dw: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    check_step_shapes(x, drift, sigma, dw)?;
    let mut out = DVector::zeros(x.len());
    euler_forward_into(
        x.as_slice(),
        drift.as_slice(),
        sigma,
        dw.as_slice(),
        dt,
        out.as_mut_slice(),
    );
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "forward Euler step",
            location: Location::default(),
        });
    }
    Ok(out)
}

/// `x - drift·dt - sigma·dW`: one step of a backward-adapted SDE from
/// `t` to `t - dt`.
pub fn backward_euler_step(
    x: &DVector<f64>,
    drift: &DVector<f64>,
    sigma: &DMatrix<f64>,
    dw: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    check_step_shapes(x, drift, sigma, dw)?;
    let mut out = DVector::zeros(x.len());
    euler_backward_into(
        x.as_slice(),
        drift.as_slice(),
        sigma,
        dw.as_slice(),
        dt,
        out.as_mut_slice(),
    );
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "backward Euler step",
            location: Location::default(),
        });
    }
    Ok(out)
}
