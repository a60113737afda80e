//! Discretized Brownian drivers.
//!
//! Increments are counter-based: entry `(i, j)` of a path is a pure function
//! of `(seed, stream_id, i, j)`, so a path is reproducible from its labels
//! alone and identical across worker counts. Dyadic refinement keeps common
//! noise exact: a coarse path is the blockwise sum of the fine one.

use crate::error::{Error, Result};
use crate::rng;
use crate::Matrix;

#[derive(Debug, Clone)]
pub struct NoisePath {
    /// Number of Brownian motions.
    pub n_noise: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub stream: u64,
    /// Row `i`, column `j`: increment of Brownian motion `i` over step `j`,
    /// distributed N(0, dt).
    pub increments: Matrix,
}

impl NoisePath {
    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    /// Value of Brownian motion `i` accumulated over steps `[from, to)`.
    pub fn window_sum(&self, i: usize, from: usize, to: usize) -> f64 {
        (from..to).map(|j| self.increments[(i, j)]).sum()
    }

    /// Sign-flipped copy (antithetic partner).
    pub fn negated(&self) -> NoisePath {
        NoisePath { increments: -&self.increments, ..self.clone() }
    }

    /// Coarsen by an integer factor, summing consecutive fine increments.
    /// The result is driven by the same underlying Brownian path.
    pub fn coarsen(&self, factor: usize) -> Result<NoisePath> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let increments = Matrix::from_fn(self.n_noise, steps, |i, j| {
            self.window_sum(i, j * factor, (j + 1) * factor)
        });
        Ok(NoisePath {
            n_noise: self.n_noise,
            dt: self.dt * factor as f64,
            steps,
            seed: self.seed,
            stream: self.stream,
            increments,
        })
    }

    /// Restrict to the first `steps` increments.
    pub fn truncate(&self, steps: usize) -> Result<NoisePath> {
        if steps > self.steps {
            return Err(Error::InvalidGrid(format!(
                "cannot truncate {} steps to {steps}",
                self.steps
            )));
        }
        Ok(NoisePath {
            steps,
            increments: self.increments.columns(0, steps).into_owned(),
            ..self.clone()
        })
    }
}

/// Number of steps for a horizon/step pair; errors unless T/dt is an integer.
pub fn grid_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !dt.is_finite() || dt <= 0.0 || !horizon.is_finite() || horizon < 0.0 {
        return Err(Error::InvalidGrid(format!("bad grid: T = {horizon}, dt = {dt}")));
    }
    let ratio = horizon / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidGrid(format!(
            "horizon {horizon} is not an integer multiple of dt {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Generate a Brownian driver with `n` independent motions on a uniform grid.
pub fn simulate_noise(
    n: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
    stream: u64,
) -> Result<NoisePath> {
    let steps = grid_steps(horizon, dt)?;
    let sqrt_dt = dt.sqrt();
    let increments = Matrix::from_fn(n, steps, |i, j| {
        sqrt_dt * rng::normal_at(seed, stream, i as u64, j as u64)
    });
    Ok(NoisePath { n_noise: n, dt, steps, seed, stream, increments })
}
