//! Control laws and spike perturbations.
//!
//! A law yields a control value per (particle, step, time, state, moments).
//! Spikes replace the base law on a window [t0, t0 + eps) that must be a
//! union of whole grid cells; nothing is ever rounded onto the grid behind
//! the caller's back.

use std::fmt;
use std::sync::Arc;

use ndarray::Array3;

use super::grid::TimeGrid;
use crate::{Error, Result};

type FeedbackFn = dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub enum ControlLaw {
    /// The same value for every particle and time.
    Constant(Vec<f64>),
    /// A per-particle, per-step table of shape (n, steps, du).
    OpenLoop(Arc<Array3<f64>>),
    /// u = phi(t, x, m).
    Feedback(Arc<FeedbackFn>),
    /// `base` outside the window, `beta` on steps start..start + cells.
    Spiked {
        base: Box<ControlLaw>,
        beta: Box<ControlLaw>,
        start: usize,
        cells: usize,
    },
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::Constant(u) => write!(f, "Constant({u:?})"),
            ControlLaw::OpenLoop(tab) => write!(f, "OpenLoop{:?}", tab.dim()),
            ControlLaw::Feedback(_) => write!(f, "Feedback(..)"),
            ControlLaw::Spiked {
                base,
                beta,
                start,
                cells,
            } => write!(
                f,
                "Spiked {{ base: {base:?}, beta: {beta:?}, steps: {start}..{} }}",
                start + cells
            ),
        }
    }
}

impl ControlLaw {
    pub fn constant(u: &[f64]) -> Self {
        ControlLaw::Constant(u.to_vec())
    }

    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        ControlLaw::Feedback(Arc::new(f))
    }

    /// The control emitted for particle `i` on step `k`.
    pub fn value(&self, i: usize, k: usize, t: f64, x: &[f64], m: &[f64]) -> Vec<f64> {
        match self {
            ControlLaw::Constant(u) => u.clone(),
            ControlLaw::OpenLoop(tab) => tab.index_axis(ndarray::Axis(0), i)
                .index_axis(ndarray::Axis(0), k)
                .to_vec(),
            ControlLaw::Feedback(f) => f(t, x, m),
            ControlLaw::Spiked {
                base,
                beta,
                start,
                cells,
            } => {
                if k >= *start && k < start + cells {
                    beta.value(i, k, t, x, m)
                } else {
                    base.value(i, k, t, x, m)
                }
            }
        }
    }

    /// Checks an open-loop table against the ensemble geometry; other
    /// variants have nothing to validate up front.
    pub fn validate(&self, n: usize, steps: usize, du: usize) -> Result<()> {
        match self {
            ControlLaw::Constant(u) => {
                if u.len() != du {
                    return Err(Error::Dimension(format!(
                        "constant control has {} components, model wants {du}",
                        u.len()
                    )));
                }
            }
            ControlLaw::OpenLoop(tab) => {
                if tab.dim() != (n, steps, du) {
                    return Err(Error::Dimension(format!(
                        "open-loop table is {:?}, expected ({n}, {steps}, {du})",
                        tab.dim()
                    )));
                }
            }
            ControlLaw::Feedback(_) => {}
            ControlLaw::Spiked { base, beta, .. } => {
                base.validate(n, steps, du)?;
                beta.validate(n, steps, du)?;
            }
        }
        Ok(())
    }
}

/// A window perturbation: play `beta` on [t0, t0 + eps) instead of the base
/// law. Both endpoints must land on grid knots.
#[derive(Debug, Clone)]
pub struct SpikeVariation {
    pub t0: f64,
    pub eps: f64,
    pub beta: ControlLaw,
}

impl SpikeVariation {
    pub fn new(t0: f64, eps: f64, beta: ControlLaw) -> Self {
        Self { t0, eps, beta }
    }
}

/// Combines a base law with a spike into the law actually simulated. An
/// empty window (eps resolving to zero cells) returns the base law
/// unchanged.
pub fn apply_spike(base: &ControlLaw, spike: &SpikeVariation, grid: &TimeGrid) -> Result<ControlLaw> {
    if spike.t0 < 0.0 || spike.t0 + spike.eps > grid.horizon() * (1.0 + 1e-9) {
        return Err(Error::Argument(format!(
            "spike window [{}, {}] leaves the horizon [0, {}]",
            spike.t0,
            spike.t0 + spike.eps,
            grid.horizon()
        )));
    }
    let start = grid.index_of(spike.t0)?;
    let cells = grid.cells_for(spike.eps)?;
    if cells == 0 {
        return Ok(base.clone());
    }
    Ok(ControlLaw::Spiked {
        base: Box::new(base.clone()),
        beta: Box::new(spike.beta.clone()),
        start,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_covers_exactly_its_cells() {
        // t0 = 0.2, eps = 0.1 on a 10-step unit grid: step 2 only.
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let base = ControlLaw::constant(&[0.0]);
        let spike = SpikeVariation::new(0.2, 0.1, ControlLaw::constant(&[1.0]));
        let law = apply_spike(&base, &spike, &grid).unwrap();
        for k in 0..10 {
            let v = law.value(0, k, grid.knot(k), &[0.0], &[0.0]);
            let expect = if k == 2 { 1.0 } else { 0.0 };
            assert_eq!(v[0], expect, "step {k}");
        }
    }

    #[test]
    fn empty_window_returns_the_base_law() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let base = ControlLaw::constant(&[0.7]);
        let spike = SpikeVariation::new(0.2, 0.0, ControlLaw::constant(&[5.0]));
        let law = apply_spike(&base, &spike, &grid).unwrap();
        for k in 0..10 {
            assert_eq!(law.value(0, k, 0.0, &[0.0], &[0.0])[0], 0.7);
        }
    }

    #[test]
    fn misaligned_or_overhanging_spikes_are_rejected() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let base = ControlLaw::constant(&[0.0]);
        let bad_eps = SpikeVariation::new(0.2, 0.05, ControlLaw::constant(&[1.0]));
        assert!(matches!(
            apply_spike(&base, &bad_eps, &grid),
            Err(Error::Alignment(_))
        ));
        let bad_t0 = SpikeVariation::new(0.25, 0.1, ControlLaw::constant(&[1.0]));
        assert!(matches!(
            apply_spike(&base, &bad_t0, &grid),
            Err(Error::Alignment(_))
        ));
        let overhang = SpikeVariation::new(0.95, 0.1, ControlLaw::constant(&[1.0]));
        assert!(matches!(
            apply_spike(&base, &overhang, &grid),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn feedback_and_open_loop_values_flow_through() {
        let law = ControlLaw::feedback(|t, x, m| vec![t + x[0] + m[0]]);
        assert_eq!(law.value(3, 1, 0.5, &[1.0], &[2.0])[0], 3.5);

        let mut tab = Array3::zeros((2, 3, 1));
        tab[[1, 2, 0]] = 9.0;
        let law = ControlLaw::OpenLoop(Arc::new(tab));
        assert_eq!(law.value(1, 2, 0.0, &[0.0], &[0.0])[0], 9.0);
        assert!(law.validate(2, 3, 1).is_ok());
        assert!(law.validate(2, 4, 1).is_err());
    }
}
