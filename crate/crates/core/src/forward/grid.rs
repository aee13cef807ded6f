//! Uniform time grid. Every simulation, spike window and backward sweep in
//! the crate shares this discretisation, so alignment questions are settled
//! here once.

use crate::{Error, Result};

/// Relative tolerance for deciding that a time or a window length sits on a
/// grid knot. We refuse to round silently: anything further off than this is
/// an alignment error the caller has to fix.
const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Argument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::Argument("steps must be at least 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// The k-th knot, k in 0..=steps.
    pub fn knot(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.knot(k)).collect()
    }

    /// Number of whole cells covering a window of length `eps`. Zero is
    /// allowed (an empty window); misaligned lengths are errors, never
    /// rounded.
    pub fn cells_for(&self, eps: f64) -> Result<usize> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::Argument(format!(
                "window length must be nonnegative, got {eps}"
            )));
        }
        let dt = self.dt();
        let cells = (eps / dt).round();
        if (cells * dt - eps).abs() > ALIGN_TOL * dt.max(eps.abs()).max(1e-300) {
            return Err(Error::Alignment(format!(
                "window length {eps} is not a whole number of cells of dt = {dt}"
            )));
        }
        Ok(cells as usize)
    }

    /// Index of the knot at time `t`, or an alignment error.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        if t < 0.0 || t > self.horizon * (1.0 + ALIGN_TOL) || !t.is_finite() {
            return Err(Error::Argument(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        let dt = self.dt();
        let k = (t / dt).round();
        if (k * dt - t).abs() > ALIGN_TOL * dt.max(t.abs()).max(1e-300) {
            return Err(Error::Alignment(format!(
                "time {t} does not sit on a knot of dt = {dt}"
            )));
        }
        Ok(k as usize)
    }

    /// The same horizon with `factor` times as many steps, for refinement
    /// studies.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Argument("refinement factor must be positive".into()));
        }
        Self::new(self.horizon, self.steps * factor)
    }
}
