//! The pair field (PP, Q1, Q2) over two independent particle ensembles.
//!
//! The field couples one particle from each replica and solves, for every
//! pair, a backward equation whose driver transports the matrix through the
//! state Jacobians of both slots and adds marginal couplings that average
//! the field itself over one slot. That self-reference is resolved by a
//! Picard iteration: the coupling averages are frozen from the previous
//! iterate, the resulting decoupled pair equations are solved exactly as in
//! the other stages, and the loop stops once a time-weighted gap between
//! consecutive iterates falls below tolerance. The weight exponent can be
//! doubled a few times when the observed gap refuses to settle, which
//! certifies contraction in a coarser norm without discarding progress.
//!
//! Sources and terminal data are static across iterations and factorize
//! into per-slot blocks: pooled second moment derivatives of the
//! Hamiltonian and terminal cost, slot-one blocks built from the
//! second-order pair, and slot-two blocks through the moment map gradient.
//! The plain source keeps those blocks one-sided; the symmetrized variant
//! averages the source with the transposed source of the swapped pair,
//! which makes the solved field transpose-covariant under exchanging the
//! two replicas.

use ndarray::{Array2, Array3, Array5, Array6, Axis};
use rayon::prelude::*;

use super::basis::{regress_conditional, PolyFeatures};
use super::first::{Backend, FirstAdjoint, QMode};
use super::second::SecondAdjoint;
use crate::coeffs::{hamiltonian, Coefficients};
use crate::forward::rng::role;
use crate::forward::{particle_rng, ParticleEnsemble};
use crate::{Error, Result};

/// Which source the pair equations carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThirdVariant {
    /// One-sided source blocks, matching the raw pair equation.
    Plain,
    /// Source and terminal averaged with their slot-swapped transposes.
    Symmetrized,
}

/// Which particle pairs the field is solved on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSelection {
    /// All n * n pairs.
    Dense,
    /// A deterministic subset of particles; the field lives on the product
    /// of the subset with itself and the coupling averages run over the
    /// subset only.
    Subsample { count: usize },
}

#[derive(Debug, Clone)]
pub struct ThirdAdjointSettings {
    pub backend: Backend,
    pub q_mode: QMode,
    pub variant: ThirdVariant,
    pub pairs: PairSelection,
    /// Polynomial degree of the regression basis on the concatenated pair
    /// state.
    pub degree: usize,
    pub ridge: f64,
    pub sweep_tol: f64,
    pub max_sweeps: usize,
    /// Exponential weight of the iteration gap metric.
    pub kappa: f64,
    /// Stop once the weighted squared gap falls below this.
    pub tol: f64,
    /// Iteration budget per weight level.
    pub max_iter: usize,
    /// How many times kappa may be doubled before giving up.
    pub kappa_doublings: usize,
}

impl Default for ThirdAdjointSettings {
    fn default() -> Self {
        Self {
            backend: Backend::Regression,
            q_mode: QMode::DwProjection,
            variant: ThirdVariant::Plain,
            pairs: PairSelection::Dense,
            degree: 2,
            ridge: 1e-8,
            sweep_tol: 1e-12,
            max_sweeps: 50,
            kappa: 10.0,
            tol: 1e-16,
            max_iter: 60,
            kappa_doublings: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThirdAdjoint {
    /// Particle indices the field is solved on, ascending. Dense selection
    /// lists every particle.
    pub indices: Vec<usize>,
    /// (s, s, steps + 1, d, d): row index pairs with the first ensemble,
    /// column index with the second.
    pub pp: Array5<f64>,
    /// (s, s, steps, dw, d, d), integrand against the first ensemble noise.
    pub psi1: Array6<f64>,
    /// Same for the second ensemble noise.
    pub psi2: Array6<f64>,
    /// Weighted squared gaps between consecutive iterates, one per sweep of
    /// the Picard loop, under the final weight.
    pub picard_gaps: Vec<f64>,
    /// The weight exponent that certified convergence.
    pub kappa_used: f64,
    /// Which source the field was solved with, so downstream consumers can
    /// reassemble the matching integrand.
    pub variant: ThirdVariant,
}

impl ThirdAdjoint {
    pub fn pp_at(&self, i: usize, j: usize, k: usize) -> Array2<f64> {
        self.pp.slice(ndarray::s![i, j, k, .., ..]).to_owned()
    }
}

/// Per-slot coefficient snapshots at one time step, for selected particles.
struct SlotStep {
    a_x: Vec<Array2<f64>>,
    b_x: Vec<Array3<f64>>,
    a_m: Vec<Array2<f64>>,
    b_m: Vec<Array3<f64>>,
    dpsi: Vec<Array2<f64>>,
    diffusion: Vec<Array2<f64>>,
}

fn slot_step(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    sel: &[usize],
    k: usize,
) -> SlotStep {
    let t = ens.grid.knot(k);
    let m = ens.moments_at(k);
    let map = model.moment_map();
    let mut out = SlotStep {
        a_x: Vec::with_capacity(sel.len()),
        b_x: Vec::with_capacity(sel.len()),
        a_m: Vec::with_capacity(sel.len()),
        b_m: Vec::with_capacity(sel.len()),
        dpsi: Vec::with_capacity(sel.len()),
        diffusion: Vec::with_capacity(sel.len()),
    };
    for &l in sel {
        let x = ens.state(l, k);
        let u = ens.control(l, k);
        out.a_x.push(model.drift_x(t, x, m, u));
        out.b_x.push(model.diffusion_x(t, x, m, u));
        out.a_m.push(model.drift_m(t, x, m, u));
        out.b_m.push(model.diffusion_m(t, x, m, u));
        out.dpsi.push(map.dpsi(x));
        out.diffusion.push(model.diffusion(t, x, m, u));
    }
    out
}

/// The one-sided slot block (P + P^T) A_m + sum_c B_x^T (P + P^T) B_m
/// + sum_c (Q + Q^T) B_m, a (d, k) matrix per particle.
fn source_row_block(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    second: &SecondAdjoint,
    l: usize,
    k: usize,
) -> Array2<f64> {
    let dims = model.dims();
    let (d, dwn) = (dims.d, dims.dw);
    let kk = model.moment_map().k();
    let t = ens.grid.knot(k);
    let m = ens.moments_at(k);
    let x = ens.state(l, k);
    let u = ens.control(l, k);
    let a_m = model.drift_m(t, x, m, u);
    let b_m = model.diffusion_m(t, x, m, u);
    let b_x = model.diffusion_x(t, x, m, u);

    let p = second.p_at(l, k);
    let mut psym = Array2::<f64>::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            psym[[a, b]] = p[[a, b]] + p[[b, a]];
        }
    }
    let mut out = Array2::<f64>::zeros((d, kk));
    for a in 0..d {
        for r in 0..kk {
            let mut v = 0.0;
            for e in 0..d {
                v += psym[[a, e]] * a_m[[e, r]];
            }
            out[[a, r]] = v;
        }
    }
    for c in 0..dwn {
        let q = second.q_at(l, k, c);
        for a in 0..d {
            for r in 0..kk {
                let mut v = 0.0;
                for e in 0..d {
                    for f in 0..d {
                        v += b_x[[c, e, a]] * psym[[e, f]] * b_m[[c, f, r]];
                    }
                    v += (q[[a, e]] + q[[e, a]]) * b_m[[c, e, r]];
                }
                out[[a, r]] += v;
            }
        }
    }
    out
}

/// Driver of one pair equation given its local blocks, the frozen coupling
/// averages and the static source. Everything the assembly reads is in the
/// argument list, so pooled quantities cannot leak in through a side door.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_driver(
    d: usize,
    dwn: usize,
    kk: usize,
    ax1: &Array2<f64>,
    ax2: &Array2<f64>,
    bx1: &Array3<f64>,
    bx2: &Array3<f64>,
    dpsi1: &Array2<f64>,
    dpsi2: &Array2<f64>,
    cpl1: &Array2<f64>,
    cpl2: &Array2<f64>,
    source: &Array2<f64>,
    phi: &[f64],
    q1: &[f64],
    q2: &[f64],
    out: &mut [f64],
) {
    let dd = d * d;
    for a in 0..d {
        for b in 0..d {
            let mut v = source[[a, b]];
            for e in 0..d {
                v += ax1[[e, a]] * phi[e * d + b];
                v += phi[a * d + e] * ax2[[e, b]];
            }
            for c in 0..dwn {
                for e in 0..d {
                    v += bx1[[c, e, a]] * q1[c * dd + e * d + b];
                    v += q2[c * dd + a * d + e] * bx2[[c, e, b]];
                }
            }
            for r in 0..kk {
                v += dpsi1[[r, a]] * cpl1[[r, b]];
                v += cpl2[[a, r]] * dpsi2[[r, b]];
            }
            out[a * d + b] = v;
        }
    }
}

fn pooled_moments_hessian(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    k: usize,
    acc: &mut Array2<f64>,
) -> Result<()> {
    let dims = model.dims();
    let (d, dwn) = (dims.d, dims.dw);
    let kk = model.moment_map().k();
    let t = ens.grid.knot(k);
    let m = ens.moments_at(k);
    for l in 0..ens.n() {
        let x = ens.state(l, k);
        let u = ens.control(l, k);
        let p = first.p_at(l, k);
        let q = first.q_at(l, k);
        let eval = hamiltonian(model, t, x, m, u, &p, q.view())?;
        acc.scaled_add(1.0, &eval.h_mm);
        let b_m = model.diffusion_m(t, x, m, u);
        let pl = second.p_at(l, k);
        for c in 0..dwn {
            for r in 0..kk {
                for s in 0..kk {
                    let mut v = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            v += b_m[[c, a, r]] * pl[[a, b]] * b_m[[c, b, s]];
                        }
                    }
                    acc[[r, s]] += v;
                }
            }
        }
    }
    Ok(())
}

fn hxm_blocks(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    first: &FirstAdjoint,
    sel: &[usize],
    k: usize,
) -> Result<Vec<Array2<f64>>> {
    let t = ens.grid.knot(k);
    let m = ens.moments_at(k);
    sel.iter()
        .map(|&l| {
            let p = first.p_at(l, k);
            let q = first.q_at(l, k);
            let eval = hamiltonian(model, t, ens.state(l, k), m, ens.control(l, k), &p, q.view())?;
            Ok(eval.h_xm)
        })
        .collect()
}

/// source(i, j) = dpsi1_i^T pooled dpsi2_j + 2 dpsi1_i^T hxm2_j^T
/// + row1_i dpsi2_j, written into `out`.
fn one_sided_source(
    d: usize,
    kk: usize,
    dpsi1: &Array2<f64>,
    dpsi2: &Array2<f64>,
    pooled: &Array2<f64>,
    hxm2: &Array2<f64>,
    row1: &Array2<f64>,
    out: &mut Array2<f64>,
) {
    for a in 0..d {
        for b in 0..d {
            let mut v = 0.0;
            for r in 0..kk {
                for s in 0..kk {
                    v += dpsi1[[r, a]] * pooled[[r, s]] * dpsi2[[s, b]];
                }
                v += 2.0 * dpsi1[[r, a]] * hxm2[[b, r]];
                v += row1[[a, r]] * dpsi2[[r, b]];
            }
            out[[a, b]] = v;
        }
    }
}

/// The static source field on the selected particle pairs, laid out as
/// (s, s, steps, d, d) with the row slot indexing the first ensemble and the
/// column slot the second. This is the exact array `solve_third` integrates
/// against, exposed so the verification layer can pair it with the variation
/// flows and land on the same floats.
#[allow(clippy::too_many_arguments)]
pub(crate) fn static_pair_source(
    model: &dyn Coefficients,
    ens1: &ParticleEnsemble,
    first1: &FirstAdjoint,
    second1: &SecondAdjoint,
    ens2: &ParticleEnsemble,
    first2: &FirstAdjoint,
    second2: &SecondAdjoint,
    sel: &[usize],
    symmetric: bool,
) -> Result<Array5<f64>> {
    let dims = model.dims();
    let map = model.moment_map();
    let d = dims.d;
    let kk = map.k();
    let n = ens1.n();
    let steps = ens1.grid.steps();
    let s = sel.len();

    let mut source = Array5::<f64>::zeros((s, s, steps, d, d));
    for k in 0..steps {
        let mut pooled = Array2::<f64>::zeros((kk, kk));
        pooled_moments_hessian(model, ens1, first1, second1, k, &mut pooled)?;
        pooled_moments_hessian(model, ens2, first2, second2, k, &mut pooled)?;
        pooled.mapv_inplace(|v| v / (2 * n) as f64);

        let dpsi1: Vec<Array2<f64>> = sel.iter().map(|&l| map.dpsi(ens1.state(l, k))).collect();
        let dpsi2: Vec<Array2<f64>> = sel.iter().map(|&l| map.dpsi(ens2.state(l, k))).collect();
        let hxm2 = hxm_blocks(model, ens2, first2, sel, k)?;
        let row1: Vec<Array2<f64>> = sel
            .iter()
            .map(|&l| source_row_block(model, ens1, second1, l, k))
            .collect();
        let (hxm1, row2) = if symmetric {
            (
                hxm_blocks(model, ens1, first1, sel, k)?,
                sel.iter()
                    .map(|&l| source_row_block(model, ens2, second2, l, k))
                    .collect::<Vec<_>>(),
            )
        } else {
            (Vec::new(), Vec::new())
        };

        let mut fwd = Array2::<f64>::zeros((d, d));
        let mut bwd = Array2::<f64>::zeros((d, d));
        for i in 0..s {
            for j in 0..s {
                one_sided_source(d, kk, &dpsi1[i], &dpsi2[j], &pooled, &hxm2[j], &row1[i], &mut fwd);
                if symmetric {
                    one_sided_source(
                        d, kk, &dpsi2[j], &dpsi1[i], &pooled, &hxm1[i], &row2[j], &mut bwd,
                    );
                    for a in 0..d {
                        for b in 0..d {
                            source[[i, j, k, a, b]] = 0.5 * (fwd[[a, b]] + bwd[[b, a]]);
                        }
                    }
                } else {
                    for a in 0..d {
                        for b in 0..d {
                            source[[i, j, k, a, b]] = fwd[[a, b]];
                        }
                    }
                }
            }
        }
    }
    Ok(source)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_third(
    model: &dyn Coefficients,
    ens1: &ParticleEnsemble,
    first1: &FirstAdjoint,
    second1: &SecondAdjoint,
    ens2: &ParticleEnsemble,
    first2: &FirstAdjoint,
    second2: &SecondAdjoint,
    settings: &ThirdAdjointSettings,
) -> Result<ThirdAdjoint> {
    let dims = model.dims();
    let map = model.moment_map();
    let (d, dwn) = (dims.d, dims.dw);
    let kk = map.k();
    let dd = d * d;
    let n = ens1.n();
    let steps = ens1.grid.steps();
    let dt = ens1.grid.dt();
    if ens2.n() != n || ens2.grid.steps() != steps || (ens2.grid.dt() - dt).abs() > 1e-12 * dt {
        return Err(Error::Argument(
            "the two replicas must share the particle count and time grid".into(),
        ));
    }
    for (fa, sa) in [(first1, second1), (first2, second2)] {
        if fa.p.dim() != (n, steps + 1, d) || sa.big_p.dim() != (n, steps + 1, d, d) {
            return Err(Error::Dimension(
                "adjoint inputs do not match the ensembles".into(),
            ));
        }
    }
    if settings.backend == Backend::Deterministic
        && !(map.is_affine() && model.flags().affine_dynamics)
    {
        return Err(Error::Argument(
            "the deterministic pair backend needs an affine moment map and affine dynamics, \
             which make the field constant in the pair state"
                .into(),
        ));
    }

    let sel: Vec<usize> = match settings.pairs {
        PairSelection::Dense => (0..n).collect(),
        PairSelection::Subsample { count } => {
            if count < 2 || count > n {
                return Err(Error::Argument(format!(
                    "pair subsample of {count} outside 2..={n}"
                )));
            }
            let mut pool: Vec<usize> = (0..n).collect();
            let mut rng = particle_rng(ens1.seed, role::SUBSAMPLE, 0);
            for i in 0..count {
                let j = rand::Rng::random_range(&mut rng, i..n);
                pool.swap(i, j);
            }
            let mut chosen = pool[..count].to_vec();
            chosen.sort_unstable();
            chosen
        }
    };
    let s = sel.len();

    // Static data: pooled Hessians, slot blocks, sources, terminal field.
    let symmetric = settings.variant == ThirdVariant::Symmetrized;

    let source = static_pair_source(
        model, ens1, first1, second1, ens2, first2, second2, &sel, symmetric,
    )?;
    let mut slot1_steps = Vec::with_capacity(steps);
    let mut slot2_steps = Vec::with_capacity(steps);
    for k in 0..steps {
        slot1_steps.push(slot_step(model, ens1, &sel, k));
        slot2_steps.push(slot_step(model, ens2, &sel, k));
    }

    // Terminal field.
    let mut terminal = Array2::<f64>::zeros((s * s, dd));
    {
        let m1 = ens1.moments_at(steps);
        let m2 = ens2.moments_at(steps);
        let mut gmm = Array2::<f64>::zeros((kk, kk));
        for l in 0..n {
            gmm.scaled_add(1.0, &model.terminal_cost_mm(ens1.state(l, steps), m1));
            gmm.scaled_add(1.0, &model.terminal_cost_mm(ens2.state(l, steps), m2));
        }
        gmm.mapv_inplace(|v| v / (2 * n) as f64);
        let dpsi1: Vec<Array2<f64>> = sel.iter().map(|&l| map.dpsi(ens1.state(l, steps))).collect();
        let dpsi2: Vec<Array2<f64>> = sel.iter().map(|&l| map.dpsi(ens2.state(l, steps))).collect();
        let gxm2: Vec<Array2<f64>> = sel
            .iter()
            .map(|&l| model.terminal_cost_xm(ens2.state(l, steps), m2))
            .collect();
        let gxm1: Vec<Array2<f64>> = if symmetric {
            sel.iter()
                .map(|&l| model.terminal_cost_xm(ens1.state(l, steps), m1))
                .collect()
        } else {
            Vec::new()
        };
        let zero_row = Array2::<f64>::zeros((d, kk));
        let mut fwd = Array2::<f64>::zeros((d, d));
        let mut bwd = Array2::<f64>::zeros((d, d));
        for i in 0..s {
            for j in 0..s {
                one_sided_source(d, kk, &dpsi1[i], &dpsi2[j], &gmm, &gxm2[j], &zero_row, &mut fwd);
                if symmetric {
                    one_sided_source(
                        d, kk, &dpsi2[j], &dpsi1[i], &gmm, &gxm1[i], &zero_row, &mut bwd,
                    );
                    for a in 0..d {
                        for b in 0..d {
                            terminal[[i * s + j, a * d + b]] = 0.5 * (fwd[[a, b]] + bwd[[b, a]]);
                        }
                    }
                } else {
                    for a in 0..d {
                        for b in 0..d {
                            terminal[[i * s + j, a * d + b]] = fwd[[a, b]];
                        }
                    }
                }
            }
        }
    }

    let basis = PolyFeatures::new(2 * d, settings.degree);

    let mut phi = Array5::<f64>::zeros((s, s, steps + 1, d, d));
    let mut psi1 = Array6::<f64>::zeros((s, s, steps, dwn, d, d));
    let mut psi2 = Array6::<f64>::zeros((s, s, steps, dwn, d, d));
    for i in 0..s {
        for j in 0..s {
            for a in 0..d {
                for b in 0..d {
                    phi[[i, j, steps, a, b]] = terminal[[i * s + j, a * d + b]];
                }
            }
        }
    }

    let mut kappa = settings.kappa;
    let mut doublings = 0;
    let mut gaps: Vec<f64> = Vec::new();
    let mut iter_at_level = 0;
    let mut converged = false;

    let mut phi_new = phi.clone();
    let mut psi1_new = psi1.clone();
    let mut psi2_new = psi2.clone();

    while !converged {
        iter_at_level += 1;
        backward_pass(
            model,
            ens1,
            ens2,
            &sel,
            &slot1_steps,
            &slot2_steps,
            &source,
            &terminal,
            &basis,
            settings,
            &phi,
            &psi1,
            &psi2,
            &mut phi_new,
            &mut psi1_new,
            &mut psi2_new,
        )?;

        // Weighted squared gap between the iterates.
        let mut gap = 0.0_f64;
        for k in 0..=steps {
            let w = (kappa * ens1.grid.knot(k)).exp();
            let mut acc = 0.0;
            for (a, b) in phi_new
                .index_axis(Axis(2), k)
                .iter()
                .zip(phi.index_axis(Axis(2), k).iter())
            {
                acc += (a - b) * (a - b);
            }
            gap = gap.max(w * acc / (s * s) as f64);
        }
        let mut mart = 0.0_f64;
        for k in 0..steps {
            let w = (kappa * ens1.grid.knot(k)).exp();
            let mut acc = 0.0;
            for (a, b) in psi1_new
                .index_axis(Axis(2), k)
                .iter()
                .zip(psi1.index_axis(Axis(2), k).iter())
            {
                acc += (a - b) * (a - b);
            }
            for (a, b) in psi2_new
                .index_axis(Axis(2), k)
                .iter()
                .zip(psi2.index_axis(Axis(2), k).iter())
            {
                acc += (a - b) * (a - b);
            }
            mart += dt * w * acc / (s * s) as f64;
        }
        let rho = gap + 0.75 * mart;
        if !rho.is_finite() {
            return Err(Error::Numeric(
                "pair field iteration produced a non-finite gap".into(),
            ));
        }
        gaps.push(rho);
        std::mem::swap(&mut phi, &mut phi_new);
        std::mem::swap(&mut psi1, &mut psi1_new);
        std::mem::swap(&mut psi2, &mut psi2_new);

        if rho <= settings.tol {
            converged = true;
        } else if iter_at_level >= settings.max_iter {
            if doublings < settings.kappa_doublings {
                doublings += 1;
                kappa *= 2.0;
                iter_at_level = 0;
            } else {
                return Err(Error::NonConvergence(format!(
                    "pair field iteration did not settle below {:.1e} after {} sweeps \
                     and {} weight doublings (last gap {:.3e})",
                    settings.tol, gaps.len(), doublings, rho
                )));
            }
        }
    }

    Ok(ThirdAdjoint {
        indices: sel,
        pp: phi,
        psi1,
        psi2,
        picard_gaps: gaps,
        kappa_used: kappa,
        variant: settings.variant,
    })
}

/// One inner solve: couplings frozen from `phi`/`psi1`/`psi2`, the result
/// written into the `_new` fields (terminal slice included).
#[allow(clippy::too_many_arguments)]
fn backward_pass(
    model: &dyn Coefficients,
    ens1: &ParticleEnsemble,
    ens2: &ParticleEnsemble,
    sel: &[usize],
    slot1_steps: &[SlotStep],
    slot2_steps: &[SlotStep],
    source: &Array5<f64>,
    terminal: &Array2<f64>,
    basis: &PolyFeatures,
    settings: &ThirdAdjointSettings,
    phi: &Array5<f64>,
    psi1: &Array6<f64>,
    psi2: &Array6<f64>,
    phi_new: &mut Array5<f64>,
    psi1_new: &mut Array6<f64>,
    psi2_new: &mut Array6<f64>,
) -> Result<()> {
    let dims = model.dims();
    let map = model.moment_map();
    let (d, dwn) = (dims.d, dims.dw);
    let kk = map.k();
    let dd = d * d;
    let s = sel.len();
    let steps = ens1.grid.steps();
    let dt = ens1.grid.dt();

    for i in 0..s {
        for j in 0..s {
            for a in 0..d {
                for b in 0..d {
                    phi_new[[i, j, steps, a, b]] = terminal[[i * s + j, a * d + b]];
                }
            }
        }
    }

    for k in (0..steps).rev() {
        let slot1 = &slot1_steps[k];
        let slot2 = &slot2_steps[k];

        // Coupling averages frozen from the previous iterate at this knot.
        let inv = 1.0 / s as f64;
        let mut cpl1: Vec<Array2<f64>> = vec![Array2::zeros((kk, d)); s];
        let mut cpl2: Vec<Array2<f64>> = vec![Array2::zeros((d, kk)); s];
        for l in 0..s {
            let a_m1 = &slot1.a_m[l];
            let b_m1 = &slot1.b_m[l];
            let a_m2 = &slot2.a_m[l];
            let b_m2 = &slot2.b_m[l];
            for o in 0..s {
                // cpl1[o] averages over the row slot: pairs (l, o).
                let g = &mut cpl1[o];
                for r in 0..kk {
                    for b in 0..d {
                        let mut v = 0.0;
                        for a in 0..d {
                            v += a_m1[[a, r]] * phi[[l, o, k, a, b]];
                            for c in 0..dwn {
                                v += b_m1[[c, a, r]] * psi1[[l, o, k, c, a, b]];
                            }
                        }
                        g[[r, b]] += inv * v;
                    }
                }
                // cpl2[o] averages over the column slot: pairs (o, l).
                let h = &mut cpl2[o];
                for a in 0..d {
                    for r in 0..kk {
                        let mut v = 0.0;
                        for e in 0..d {
                            v += phi[[o, l, k, a, e]] * a_m2[[e, r]];
                            for c in 0..dwn {
                                v += psi2[[o, l, k, c, a, e]] * b_m2[[c, e, r]];
                            }
                        }
                        h[[a, r]] += inv * v;
                    }
                }
            }
        }

        // Tomorrow's field as flat pair-major targets.
        let mut targets = Array2::<f64>::zeros((s * s, dd));
        for i in 0..s {
            for j in 0..s {
                for a in 0..d {
                    for b in 0..d {
                        targets[[i * s + j, a * d + b]] = phi_new[[i, j, k + 1, a, b]];
                    }
                }
            }
        }

        let mut ce = vec![0.0_f64; s * s * dd];
        let mut q1_k = vec![0.0_f64; s * s * dwn * dd];
        let mut q2_k = vec![0.0_f64; s * s * dwn * dd];
        match settings.backend {
            Backend::Deterministic => {
                // Under the gate the field carries no pair-state dependence,
                // so conditioning is the identity and the integrands vanish.
                ce.copy_from_slice(targets.as_slice().expect("contiguous targets"));
            }
            Backend::Regression => {
                let mut feats = Array2::<f64>::zeros((s * s, basis.len()));
                let mut pair_state = vec![0.0_f64; 2 * d];
                let mut rows: Vec<Vec<f64>> = Vec::with_capacity(s * s);
                for i in 0..s {
                    let xi = ens1.state(sel[i], k);
                    pair_state[..d].copy_from_slice(xi);
                    for j in 0..s {
                        pair_state[d..].copy_from_slice(ens2.state(sel[j], k));
                        let row = basis.eval(&pair_state);
                        for (f, v) in row.iter().enumerate() {
                            feats[[i * s + j, f]] = *v;
                        }
                        rows.push(row);
                    }
                }
                let fit = regress_conditional(k, feats.view(), targets.view(), settings.ridge)?;
                let mut out = vec![0.0; dd];
                for (pair, row) in rows.iter().enumerate() {
                    fit.predict_into(row, &mut out);
                    ce[pair * dd..(pair + 1) * dd].copy_from_slice(&out);
                }
                match settings.q_mode {
                    QMode::DwProjection => {
                        let mut qt = Array2::<f64>::zeros((s * s, 2 * dwn * dd));
                        for i in 0..s {
                            for j in 0..s {
                                for c in 0..dwn {
                                    let w1 = ens1.dw[[sel[i], k, c]] / dt;
                                    let w2 = ens2.dw[[sel[j], k, c]] / dt;
                                    for entry in 0..dd {
                                        let y = targets[[i * s + j, entry]];
                                        qt[[i * s + j, c * dd + entry]] = y * w1;
                                        qt[[i * s + j, (dwn + c) * dd + entry]] = y * w2;
                                    }
                                }
                            }
                        }
                        let qfit =
                            regress_conditional(k, feats.view(), qt.view(), settings.ridge)?;
                        let mut qout = vec![0.0; 2 * dwn * dd];
                        for (pair, row) in rows.iter().enumerate() {
                            qfit.predict_into(row, &mut qout);
                            q1_k[pair * dwn * dd..(pair + 1) * dwn * dd]
                                .copy_from_slice(&qout[..dwn * dd]);
                            q2_k[pair * dwn * dd..(pair + 1) * dwn * dd]
                                .copy_from_slice(&qout[dwn * dd..]);
                        }
                    }
                    QMode::GradientOfConditionalMean => {
                        let mut pair_state = vec![0.0_f64; 2 * d];
                        for i in 0..s {
                            let xi = ens1.state(sel[i], k);
                            pair_state[..d].copy_from_slice(xi);
                            for j in 0..s {
                                pair_state[d..].copy_from_slice(ens2.state(sel[j], k));
                                let grad = basis.grad(&pair_state);
                                let pair = i * s + j;
                                for entry in 0..dd {
                                    for c in 0..dwn {
                                        let mut v1 = 0.0;
                                        let mut v2 = 0.0;
                                        for a in 0..d {
                                            let mut s1 = 0.0;
                                            let mut s2 = 0.0;
                                            for f in 0..basis.len() {
                                                s1 += fit.coeffs[[f, entry]] * grad[[f, a]];
                                                s2 += fit.coeffs[[f, entry]] * grad[[f, d + a]];
                                            }
                                            v1 += s1 * slot1.diffusion[i][[a, c]];
                                            v2 += s2 * slot2.diffusion[j][[a, c]];
                                        }
                                        q1_k[pair * dwn * dd + c * dd + entry] = v1;
                                        q2_k[pair * dwn * dd + c * dd + entry] = v2;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        // Implicit sweeps, pair by pair. Rows are independent given the
        // frozen couplings, so they run in parallel.
        let mut phik = vec![0.0_f64; s * s * dd];
        let sweep_result: Result<()> = phik
            .par_chunks_mut(s * dd)
            .enumerate()
            .try_for_each(|(i, row)| {
                let mut drv = vec![0.0_f64; dd];
                let mut cur = vec![0.0_f64; dd];
                for j in 0..s {
                    let pair = i * s + j;
                    let ce_p = &ce[pair * dd..(pair + 1) * dd];
                    let q1_p = &q1_k[pair * dwn * dd..(pair + 1) * dwn * dd];
                    let q2_p = &q2_k[pair * dwn * dd..(pair + 1) * dwn * dd];
                    let src = source.slice(ndarray::s![i, j, k, .., ..]);
                    let src = src.to_owned();
                    cur.copy_from_slice(ce_p);
                    let mut converged = false;
                    for _sweep in 0..settings.max_sweeps {
                        pair_driver(
                            d,
                            dwn,
                            kk,
                            &slot1.a_x[i],
                            &slot2.a_x[j],
                            &slot1.b_x[i],
                            &slot2.b_x[j],
                            &slot1.dpsi[i],
                            &slot2.dpsi[j],
                            &cpl1[j],
                            &cpl2[i],
                            &src,
                            &cur,
                            q1_p,
                            q2_p,
                            &mut drv,
                        );
                        let mut diff = 0.0_f64;
                        let mut scale = 0.0_f64;
                        for entry in 0..dd {
                            let next = ce_p[entry] + dt * drv[entry];
                            diff = diff.max((next - cur[entry]).abs());
                            scale = scale.max(next.abs());
                            cur[entry] = next;
                        }
                        if diff <= settings.sweep_tol * (1.0 + scale) {
                            converged = true;
                            break;
                        }
                    }
                    if !converged {
                        return Err(Error::NonConvergence(format!(
                            "implicit pair sweep stalled at step {k}"
                        )));
                    }
                    row[j * dd..(j + 1) * dd].copy_from_slice(&cur);
                }
                Ok(())
            });
        sweep_result?;

        for i in 0..s {
            for j in 0..s {
                let pair = i * s + j;
                for a in 0..d {
                    for b in 0..d {
                        phi_new[[i, j, k, a, b]] = phik[pair * dd + a * d + b];
                        for c in 0..dwn {
                            psi1_new[[i, j, k, c, a, b]] = q1_k[pair * dwn * dd + c * dd + a * d + b];
                            psi2_new[[i, j, k, c, a, b]] = q2_k[pair * dwn * dd + c * dd + a * d + b];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::first::{solve_first, FirstAdjointSettings};
    use crate::adjoint::second::{solve_second, SecondAdjointSettings};
    use crate::coeffs::{CubicTerminalToy, Tp1, Tp3};
    use crate::forward::rng::role;
    use crate::forward::{role_seed, simulate_mv_sde, ControlLaw, TimeGrid};
    use crate::riccati::Tp1Riccati;

    struct Stack {
        ens: ParticleEnsemble,
        first: FirstAdjoint,
        second: SecondAdjoint,
    }

    fn det_stack(
        model: &dyn Coefficients,
        grid: &TimeGrid,
        law: &ControlLaw,
        x0: &[f64],
        spread: f64,
        n: usize,
        seed: u64,
    ) -> Stack {
        let ens = simulate_mv_sde(model, grid, law, x0, spread, n, seed).unwrap();
        let first = solve_first(
            model,
            &ens,
            &FirstAdjointSettings {
                backend: Backend::Deterministic,
                ..Default::default()
            },
        )
        .unwrap();
        let second = solve_second(
            model,
            &ens,
            &first,
            &SecondAdjointSettings {
                backend: Backend::Deterministic,
                ..Default::default()
            },
        )
        .unwrap();
        Stack { ens, first, second }
    }

    fn reg_stack(
        model: &dyn Coefficients,
        grid: &TimeGrid,
        law: &ControlLaw,
        x0: &[f64],
        spread: f64,
        n: usize,
        seed: u64,
    ) -> Stack {
        let ens = simulate_mv_sde(model, grid, law, x0, spread, n, seed).unwrap();
        let fs = FirstAdjointSettings {
            backend: Backend::Regression,
            q_mode: QMode::GradientOfConditionalMean,
            ..Default::default()
        };
        let first = solve_first(model, &ens, &fs).unwrap();
        let second = solve_second(
            model,
            &ens,
            &first,
            &SecondAdjointSettings {
                backend: Backend::Regression,
                q_mode: QMode::GradientOfConditionalMean,
                ..Default::default()
            },
        )
        .unwrap();
        Stack { ens, first, second }
    }

    fn reg_third() -> ThirdAdjointSettings {
        ThirdAdjointSettings {
            backend: Backend::Regression,
            q_mode: QMode::GradientOfConditionalMean,
            ..Default::default()
        }
    }

    #[test]
    fn measure_free_problems_converge_to_zero_in_one_sweep() {
        let model = CubicTerminalToy::default();
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let a = reg_stack(&model, &grid, &law, &[1.0], 0.2, 32, 5);
        let b = reg_stack(&model, &grid, &law, &[1.0], 0.2, 32, role_seed(5, role::REPLICA));
        let field = solve_third(
            &model, &a.ens, &a.first, &a.second, &b.ens, &b.first, &b.second, &reg_third(),
        )
        .unwrap();
        assert_eq!(field.picard_gaps.len(), 1);
        assert!(field.pp.iter().all(|v| *v == 0.0));
        assert!(field.psi1.iter().all(|v| *v == 0.0));
        assert!(field.psi2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn convex_problem_pair_field_matches_the_table() {
        let model = Tp1::default();
        let grid = TimeGrid::new(1.0, 1600).unwrap();
        let ric = Tp1Riccati::solve(&model, 1.0, 4000);
        let law = ControlLaw::constant(&[0.0]);
        let a = det_stack(&model, &grid, &law, &[1.0], 0.5, 8, 55);
        let b = det_stack(&model, &grid, &law, &[1.0], 0.5, 8, role_seed(55, role::REPLICA));
        let settings = ThirdAdjointSettings {
            backend: Backend::Deterministic,
            ..Default::default()
        };
        let field = solve_third(
            &model, &a.ens, &a.first, &a.second, &b.ens, &b.first, &b.second, &settings,
        )
        .unwrap();

        let mut worst = 0.0_f64;
        for k in 0..=1600 {
            let exact = ric.big_pp_at(grid.knot(k));
            for i in 0..8 {
                for j in 0..8 {
                    worst = worst
                        .max((field.pp[[i, j, k, 0, 0]] - exact).abs() / (1.0 + exact.abs()));
                }
            }
        }
        assert!(worst <= 1e-3, "pair field off by {worst:.2e}");
        assert!(field.psi1.iter().all(|v| *v == 0.0));

        // With a state-free field both source variants coincide.
        let sym = solve_third(
            &model,
            &a.ens,
            &a.first,
            &a.second,
            &b.ens,
            &b.first,
            &b.second,
            &ThirdAdjointSettings {
                variant: ThirdVariant::Symmetrized,
                ..settings
            },
        )
        .unwrap();
        let gap = field
            .pp
            .iter()
            .zip(sym.pp.iter())
            .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()));
        assert!(gap <= 1e-10, "variants differ by {gap:.2e}");
    }

    #[test]
    fn slot_swap_transposes_the_symmetrized_field() {
        let model = Tp3::default();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let a = det_stack(&model, &grid, &law, &[0.6], 0.5, 12, 77);
        let b = det_stack(&model, &grid, &law, &[0.6], 0.5, 12, role_seed(77, role::REPLICA));
        let settings = ThirdAdjointSettings {
            variant: ThirdVariant::Symmetrized,
            ..reg_third()
        };
        let fwd = solve_third(
            &model, &a.ens, &a.first, &a.second, &b.ens, &b.first, &b.second, &settings,
        )
        .unwrap();
        let bwd = solve_third(
            &model, &b.ens, &b.first, &b.second, &a.ens, &a.first, &a.second, &settings,
        )
        .unwrap();

        let mut worst = 0.0_f64;
        for i in 0..12 {
            for j in 0..12 {
                for k in 0..=40 {
                    worst = worst
                        .max((fwd.pp[[i, j, k, 0, 0]] - bwd.pp[[j, i, k, 0, 0]]).abs());
                }
            }
        }
        assert!(worst <= 1e-8, "swap asymmetry {worst:.2e}");
    }

    #[test]
    fn picard_iteration_contracts() {
        let model = Tp3::default();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let a = det_stack(&model, &grid, &law, &[0.6], 0.5, 16, 101);
        let b = det_stack(&model, &grid, &law, &[0.6], 0.5, 16, role_seed(101, role::REPLICA));
        let field = solve_third(
            &model, &a.ens, &a.first, &a.second, &b.ens, &b.first, &b.second, &reg_third(),
        )
        .unwrap();
        let gaps = &field.picard_gaps;
        assert!(gaps.len() >= 3, "{gaps:?}");
        let scale = gaps[0];
        for w in gaps.windows(2) {
            if w[0] > 1e-24 * scale {
                assert!(w[1] <= 0.6 * w[0], "no contraction: {gaps:?}");
            }
        }
    }

    #[test]
    fn full_count_subsample_is_bitwise_dense() {
        let model = Tp3::default();
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let a = det_stack(&model, &grid, &law, &[0.6], 0.5, 10, 13);
        let b = det_stack(&model, &grid, &law, &[0.6], 0.5, 10, role_seed(13, role::REPLICA));
        let dense = solve_third(
            &model, &a.ens, &a.first, &a.second, &b.ens, &b.first, &b.second, &reg_third(),
        )
        .unwrap();
        let sub = solve_third(
            &model,
            &a.ens,
            &a.first,
            &a.second,
            &b.ens,
            &b.first,
            &b.second,
            &ThirdAdjointSettings {
                pairs: PairSelection::Subsample { count: 10 },
                ..reg_third()
            },
        )
        .unwrap();
        assert_eq!(sub.indices, (0..10).collect::<Vec<_>>());
        assert_eq!(dense.pp, sub.pp);
        assert_eq!(dense.psi1, sub.psi1);
    }

    #[test]
    fn pair_driver_ignores_unrelated_particles() {
        let model = Tp3::default();
        let grid = TimeGrid::new(0.5, 5).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let ens = simulate_mv_sde(&model, &grid, &law, &[0.6], 0.5, 6, 3).unwrap();
        let sel: Vec<usize> = (0..6).collect();
        let k = 2;

        // Perturb a particle unrelated to the pair (1, 2) while keeping the
        // stored moments: the per-pair blocks and hence the assembled driver
        // must not move at all.
        let mut bent = ens.clone();
        for knot in 0..=5 {
            bent.states[[4, knot, 0]] += 3.5;
        }

        let dims = model.dims();
        let kk = model.moment_map().k();
        let cpl1 = Array2::from_elem((kk, dims.d), 0.37);
        let cpl2 = Array2::from_elem((dims.d, kk), -0.11);
        let src = Array2::from_elem((dims.d, dims.d), 0.83);
        let phi = vec![0.64; dims.d * dims.d];
        let q1 = vec![0.21; dims.dw * dims.d * dims.d];
        let q2 = vec![-0.09; dims.dw * dims.d * dims.d];
        let mut out_a = vec![0.0; dims.d * dims.d];
        let mut out_b = vec![0.0; dims.d * dims.d];

        for (source_ens, out) in [(&ens, &mut out_a), (&bent, &mut out_b)] {
            let s1 = slot_step(&model, source_ens, &sel, k);
            let s2 = slot_step(&model, source_ens, &sel, k);
            pair_driver(
                dims.d, dims.dw, kk, &s1.a_x[1], &s2.a_x[2], &s1.b_x[1], &s2.b_x[2],
                &s1.dpsi[1], &s2.dpsi[2], &cpl1, &cpl2, &src, &phi, &q1, &q2, out,
            );
        }
        assert_eq!(out_a, out_b);
        assert!(out_a.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn deterministic_gate_requires_affine_structure() {
        let model = Tp3::default();
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let a = det_stack(&model, &grid, &law, &[0.6], 0.5, 6, 3);
        let b = det_stack(&model, &grid, &law, &[0.6], 0.5, 6, role_seed(3, role::REPLICA));
        let res = solve_third(
            &model,
            &a.ens,
            &a.first,
            &a.second,
            &b.ens,
            &b.first,
            &b.second,
            &ThirdAdjointSettings {
                backend: Backend::Deterministic,
                ..Default::default()
            },
        );
        assert!(matches!(res, Err(Error::Argument(_))), "{res:?}");
    }

    #[test]
    fn subsample_counts_are_validated() {
        let model = Tp1::default();
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let a = det_stack(&model, &grid, &law, &[1.0], 0.5, 6, 3);
        let b = det_stack(&model, &grid, &law, &[1.0], 0.5, 6, role_seed(3, role::REPLICA));
        for count in [1, 7] {
            let res = solve_third(
                &model,
                &a.ens,
                &a.first,
                &a.second,
                &b.ens,
                &b.first,
                &b.second,
                &ThirdAdjointSettings {
                    backend: Backend::Deterministic,
                    pairs: PairSelection::Subsample { count },
                    ..Default::default()
                },
            );
            assert!(matches!(res, Err(Error::Argument(_))), "{res:?}");
        }
    }
}
