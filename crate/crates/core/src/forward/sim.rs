//! Interacting-particle simulation of the controlled dynamics.
//!
//! The ensemble couples through its empirical moment vector, recomputed once
//! per step and shared by all particles. Stepping is explicit Euler on the
//! states with the recorded Gaussian increments; the moment reduction is a
//! serial sum so results do not depend on scheduling.

use std::io::Write;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use super::control::ControlLaw;
use super::grid::TimeGrid;
use super::rng;
use crate::coeffs::{Coefficients, MomentMap};
use crate::{Error, Result};

/// Moment vector of an empirical distribution: (1/N) sum_i psi(x_i).
pub fn empirical_moments(states: ArrayView2<'_, f64>, map: &MomentMap) -> Array1<f64> {
    let n = states.nrows();
    let mut out = Array1::zeros(map.k());
    for i in 0..n {
        let row = states.row(i);
        let psi = map.psi(row.as_slice().expect("contiguous state row"));
        for (o, v) in out.iter_mut().zip(&psi) {
            *o += v;
        }
    }
    out.mapv_inplace(|v| v / n as f64);
    out
}

/// One simulated ensemble: states at every knot, the increments that drove
/// them, the controls actually emitted, and the realised moment path.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub grid: TimeGrid,
    /// (n, steps + 1, d)
    pub states: Array3<f64>,
    /// (n, steps, dw)
    pub dw: Array3<f64>,
    /// (n, steps, du)
    pub controls: Array3<f64>,
    /// (steps + 1, k)
    pub moments: Array2<f64>,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn n(&self) -> usize {
        self.states.len_of(Axis(0))
    }

    /// State of particle i at knot k as a slice.
    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let d = self.states.len_of(Axis(2));
        let flat = self.states.as_slice().expect("contiguous states");
        let steps1 = self.states.len_of(Axis(1));
        &flat[(i * steps1 + k) * d..(i * steps1 + k) * d + d]
    }

    /// Control of particle i on step k as a slice.
    pub fn control(&self, i: usize, k: usize) -> &[f64] {
        let du = self.controls.len_of(Axis(2));
        let flat = self.controls.as_slice().expect("contiguous controls");
        let steps = self.controls.len_of(Axis(1));
        &flat[(i * steps + k) * du..(i * steps + k) * du + du]
    }

    /// Moment vector at knot k.
    pub fn moments_at(&self, k: usize) -> &[f64] {
        let kk = self.moments.ncols();
        let flat = self.moments.as_slice().expect("contiguous moments");
        &flat[k * kk..(k + 1) * kk]
    }

    /// Long-format dump: one row per (particle, knot) with the knot time and
    /// the state coordinates.
    pub fn write_paths_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.states.len_of(Axis(2));
        write!(out, "particle,step,time")?;
        for j in 0..d {
            write!(out, ",x_{}", j + 1)?;
        }
        writeln!(out)?;
        for i in 0..self.n() {
            for k in 0..=self.grid.steps() {
                write!(out, "{i},{k},{}", self.grid.knot(k))?;
                for v in self.state(i, k) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Simulates the ensemble from explicit initial states and increments. This
/// is the core path: spiked re-simulations and refinement studies feed the
/// same noise back through it.
pub fn simulate_with_increments(
    model: &dyn Coefficients,
    grid: &TimeGrid,
    control: &ControlLaw,
    x0s: &Array2<f64>,
    dw: &Array3<f64>,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let dims = model.dims();
    let map = model.moment_map();
    let n = x0s.nrows();
    let steps = grid.steps();
    if n < 2 {
        return Err(Error::Argument(format!(
            "an interacting ensemble needs at least 2 particles, got {n}"
        )));
    }
    if x0s.ncols() != dims.d {
        return Err(Error::Dimension(format!(
            "initial states are {}-dimensional, model wants {}",
            x0s.ncols(),
            dims.d
        )));
    }
    if dw.dim() != (n, steps, dims.dw) {
        return Err(Error::Dimension(format!(
            "increments are {:?}, expected ({n}, {steps}, {})",
            dw.dim(),
            dims.dw
        )));
    }
    control.validate(n, steps, dims.du)?;

    let dt = grid.dt();
    let mut states = Array3::zeros((n, steps + 1, dims.d));
    let mut controls = Array3::zeros((n, steps, dims.du));
    let mut moments = Array2::zeros((steps + 1, map.k()));
    for i in 0..n {
        for j in 0..dims.d {
            states[[i, 0, j]] = x0s[[i, j]];
        }
    }

    let mut x = vec![0.0; dims.d];
    for k in 0..steps {
        let m = empirical_moments(states.index_axis(Axis(1), k), map);
        for (dst, src) in moments.row_mut(k).iter_mut().zip(m.iter()) {
            *dst = *src;
        }
        let mv = m.as_slice().expect("contiguous moments");
        let t = grid.knot(k);
        for i in 0..n {
            for j in 0..dims.d {
                x[j] = states[[i, k, j]];
            }
            let u = control.value(i, k, t, &x, mv);
            if u.len() != dims.du {
                return Err(Error::Dimension(format!(
                    "control law emitted {} components, model wants {}",
                    u.len(),
                    dims.du
                )));
            }
            if !model.control_set().contains(&u) {
                return Err(Error::Control(format!(
                    "law emitted {u:?} outside the admissible set at step {k}"
                )));
            }
            let a = model.drift(t, &x, mv, &u);
            let b = model.diffusion(t, &x, mv, &u);
            for j in 0..dims.d {
                let mut next = x[j] + a[j] * dt;
                for c in 0..dims.dw {
                    next += b[[j, c]] * dw[[i, k, c]];
                }
                if !next.is_finite() {
                    return Err(Error::Divergence {
                        step: k,
                        detail: format!("particle {i}, coordinate {j} left the finite range"),
                    });
                }
                states[[i, k + 1, j]] = next;
            }
            for (c, uv) in u.iter().enumerate() {
                controls[[i, k, c]] = *uv;
            }
        }
    }
    let m_final = empirical_moments(states.index_axis(Axis(1), steps), map);
    for (dst, src) in moments.row_mut(steps).iter_mut().zip(m_final.iter()) {
        *dst = *src;
    }

    Ok(ParticleEnsemble {
        grid: *grid,
        states,
        dw: dw.clone(),
        controls,
        moments,
        seed,
    })
}

/// Samples initial states and Brownian increments from the master seed and
/// runs the ensemble. `x0_spread` perturbs the start uniformly per
/// coordinate, which several conditional-expectation estimators need for a
/// well-conditioned first step; zero keeps the classical point start.
pub fn simulate_mv_sde(
    model: &dyn Coefficients,
    grid: &TimeGrid,
    control: &ControlLaw,
    x0: &[f64],
    x0_spread: f64,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let dims = model.dims();
    if x0.len() != dims.d {
        return Err(Error::Dimension(format!(
            "x0 has {} components, model wants {}",
            x0.len(),
            dims.d
        )));
    }
    let x0s = rng::draw_initial_states(seed, n, x0, x0_spread);
    let dw = rng::draw_increments(seed, n, grid.steps(), dims.dw, grid.dt());
    simulate_with_increments(model, grid, control, &x0s, &dw, seed)
}

/// Sums consecutive groups of `factor` fine increments into coarse ones, so
/// a coarse run can be driven by exactly the Brownian path of a fine run.
pub fn coarsen_increments(fine: &Array3<f64>, factor: usize) -> Result<Array3<f64>> {
    let (n, steps_fine, dw) = fine.dim();
    if factor == 0 || steps_fine % factor != 0 {
        return Err(Error::Argument(format!(
            "{steps_fine} fine steps do not split into groups of {factor}"
        )));
    }
    let steps = steps_fine / factor;
    let mut out = Array3::zeros((n, steps, dw));
    for i in 0..n {
        for k in 0..steps {
            for c in 0..dw {
                let mut s = 0.0;
                for f in 0..factor {
                    s += fine[[i, k * factor + f, c]];
                }
                out[[i, k, c]] = s;
            }
        }
    }
    Ok(out)
}
