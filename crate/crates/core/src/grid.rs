use crate::error::{Error, Result};

/// Uniform time grid `t_k = k * dt` for `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// Builds a grid, rejecting horizons that are not an integer multiple of `dt`.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "dt must be positive and finite, got {dt}"
            )));
        }
        let ratio = horizon / dt;
        let n = ratio.round();
        // half an ulp of the quotient, plus one rounding of the division itself
        let slack = f64::EPSILON * ratio.abs().max(1.0);
        if n < 1.0 || (ratio - n).abs() > slack {
            return Err(Error::InvalidGrid(format!(
                "horizon {horizon} is not an integer multiple of dt {dt} (ratio {ratio})"
            )));
        }
        Ok(Self {
            horizon,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.time(k))
    }
}
