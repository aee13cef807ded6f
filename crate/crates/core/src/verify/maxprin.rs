//! Pointwise test of the maximum-principle inequality along a candidate
//! control.
//!
//! At an optimum, swapping the control at a single time for any admissible
//! value can only raise the Hamiltonian corrected by the quadratic
//! diffusion term,
//!
//! ```text
//! V(t, u) = H(t, X, m, u, p, q) - H(t, X, m, a, p, q)
//!           + 0.5 <P, (B(u) - B(a)) (B(u) - B(a))^T>  >=  0,
//! ```
//!
//! with `a` the candidate's own value. The check sweeps a grid of times and
//! controls, evaluates `V` on every particle, and reports the worst value
//! together with a per-(t, u) table. Everything is normalized by the spread
//! of the base Hamiltonian so the pass threshold is dimensionless.

use crate::adjoint::{FirstAdjoint, SecondAdjoint};
use crate::coeffs::{Coefficients, ControlSet};
use crate::forward::ParticleEnsemble;
use crate::{Error, Result};

use super::duality::{ensure_first, ensure_second};

/// Where to probe the control set.
#[derive(Debug, Clone)]
pub enum UGrid {
    /// Fixed control points, kept only when the control set admits them.
    Absolute(Vec<Vec<f64>>),
    /// Evenly spaced single-axis offsets around each particle's own
    /// control value, `points` of them spanning [-span, span] per axis.
    /// Offsets are clipped to box bounds; on a finite set a shifted
    /// candidate is kept only when it lands exactly on a member.
    RelativeOffsets { span: f64, points: usize },
}

/// Worst and average inequality value for one (time, control) cell.
#[derive(Debug, Clone)]
pub struct MaxPrinRow {
    pub t: f64,
    /// The absolute candidate, or the offset pattern that was applied.
    pub u: Vec<f64>,
    /// Particles that admitted this candidate.
    pub count: usize,
    pub min_v: f64,
    pub mean_v: f64,
}

/// Outcome of the sweep.
#[derive(Debug, Clone)]
pub struct MaxPrinReport {
    /// Worst inequality value over every particle, time, and candidate.
    pub min_v: f64,
    /// max(1, spread of the base Hamiltonian over the sampled knots).
    pub scale: f64,
    pub table: Vec<MaxPrinRow>,
}

/// One candidate description: the label that goes into the table plus the
/// recipe for building the per-particle control value.
enum Candidate {
    Fixed(Vec<f64>),
    Offset { axis: usize, delta: f64 },
}

impl Candidate {
    fn label(&self, du: usize) -> Vec<f64> {
        match self {
            Candidate::Fixed(u) => u.clone(),
            Candidate::Offset { axis, delta } => {
                let mut v = vec![0.0; du];
                v[*axis] = *delta;
                v
            }
        }
    }

    /// The admissible control this candidate means for a particle whose
    /// own value is `base`, or None when the set rejects it.
    fn resolve(&self, set: &ControlSet, base: &[f64]) -> Option<Vec<f64>> {
        match self {
            Candidate::Fixed(u) => Some(u.clone()),
            Candidate::Offset { axis, delta } => {
                let mut u = base.to_vec();
                u[*axis] += delta;
                match set {
                    ControlSet::Box { lo, hi, .. } => {
                        u[*axis] = u[*axis].max(lo[*axis]).min(hi[*axis]);
                        Some(u)
                    }
                    ControlSet::Finite(_) => {
                        if set.contains(&u) {
                            Some(u)
                        } else {
                            None
                        }
                    }
                }
            }
        }
    }
}

/// Sweeps the inequality over `t_points` evenly spaced knots and the given
/// control grid, along the ensemble's own (candidate optimal) control.
pub fn check_max_principle(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    u_grid: &UGrid,
    t_points: usize,
) -> Result<MaxPrinReport> {
    ensure_first(model, ens, first)?;
    ensure_second(model, ens, second)?;
    let dims = model.dims();
    let (d, dw, du) = (dims.d, dims.dw, dims.du);
    let set = model.control_set();
    let n = ens.n();
    let steps = ens.grid.steps();
    if t_points == 0 {
        return Err(Error::Argument(
            "the time grid needs at least one sample".into(),
        ));
    }

    let candidates: Vec<Candidate> = match u_grid {
        UGrid::Absolute(points) => {
            if points.is_empty() {
                return Err(Error::Argument("the control grid is empty".into()));
            }
            if points.iter().any(|u| u.len() != du) {
                return Err(Error::Dimension(
                    "a control grid point has the wrong dimension".into(),
                ));
            }
            points
                .iter()
                .filter(|u| set.contains(u))
                .map(|u| Candidate::Fixed(u.clone()))
                .collect()
        }
        UGrid::RelativeOffsets { span, points } => {
            if *points == 0 {
                return Err(Error::Argument("the control grid is empty".into()));
            }
            let mut cs = Vec::with_capacity(du * points);
            for axis in 0..du {
                for j in 0..*points {
                    let delta = if *points == 1 {
                        0.0
                    } else {
                        -span + 2.0 * span * j as f64 / (*points - 1) as f64
                    };
                    cs.push(Candidate::Offset { axis, delta });
                }
            }
            cs
        }
    };
    if candidates.is_empty() {
        return Err(Error::Argument(
            "the control set admits none of the grid points".into(),
        ));
    }

    // Evenly spread sample knots, deduplicated when t_points > steps.
    let mut knots: Vec<usize> = (0..t_points).map(|j| j * steps / t_points).collect();
    knots.dedup();

    let mut table = Vec::with_capacity(knots.len() * candidates.len());
    let mut min_v = f64::INFINITY;
    let mut h_lo = f64::INFINITY;
    let mut h_hi = f64::NEG_INFINITY;

    for &k in &knots {
        let t = ens.grid.knot(k);
        let m = ens.moments_at(k);
        // Base coefficients and Hamiltonian per particle at this knot.
        let mut bases = Vec::with_capacity(n);
        for i in 0..n {
            let x = ens.state(i, k);
            let alpha = ens.control(i, k);
            let a0 = model.drift(t, x, m, alpha);
            let b0 = model.diffusion(t, x, m, alpha);
            let f0 = model.running_cost(t, x, m, alpha);
            let p = first.p_at(i, k);
            let q = first.q_at(i, k);
            let mut h = f0;
            for a in 0..d {
                h += a0[a] * p[a];
                for c in 0..dw {
                    h += b0[[a, c]] * q[[a, c]];
                }
            }
            h_lo = h_lo.min(h);
            h_hi = h_hi.max(h);
            bases.push((a0, b0, f0, p, q));
        }

        for cand in &candidates {
            let mut count = 0usize;
            let mut row_min = f64::INFINITY;
            let mut row_sum = 0.0;
            for i in 0..n {
                let alpha = ens.control(i, k);
                let Some(u) = cand.resolve(set, alpha) else {
                    continue;
                };
                let x = ens.state(i, k);
                let (a0, b0, f0, p, q) = &bases[i];
                let au = model.drift(t, x, m, &u);
                let bu = model.diffusion(t, x, m, &u);
                let mut v = model.running_cost(t, x, m, &u) - f0;
                let bp = second.p_at(i, k);
                for a in 0..d {
                    v += (au[a] - a0[a]) * p[a];
                    for c in 0..dw {
                        v += (bu[[a, c]] - b0[[a, c]]) * q[[a, c]];
                    }
                    for b in 0..d {
                        let mut cov = 0.0;
                        for c in 0..dw {
                            cov += (bu[[a, c]] - b0[[a, c]]) * (bu[[b, c]] - b0[[b, c]]);
                        }
                        v += 0.5 * bp[[a, b]] * cov;
                    }
                }
                count += 1;
                row_min = row_min.min(v);
                row_sum += v;
            }
            if count == 0 {
                continue;
            }
            min_v = min_v.min(row_min);
            table.push(MaxPrinRow {
                t,
                u: cand.label(du),
                count,
                min_v: row_min,
                mean_v: row_sum / count as f64,
            });
        }
    }

    if table.is_empty() {
        return Err(Error::Argument(
            "no admissible (time, control) cell survived the sweep".into(),
        ));
    }
    Ok(MaxPrinReport {
        min_v,
        scale: (h_hi - h_lo).max(1.0),
        table,
    })
}
