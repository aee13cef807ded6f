//! Pairings between the backward fields and the variation flows.
//!
//! Each check evaluates a terminal pairing (costate against a flow) on the
//! sampled paths and, independently, the time integral that the backward
//! dynamics predict for it. Both sides are kept per particle so the gap can
//! be summarised with the standard error of the paired differences; the
//! martingale noise that a fixed sample leaves behind is exactly what that
//! stderr measures. Time integrals are left-knot Riemann sums on the shared
//! grid, matching the forward scheme.
//!
//! The first two checks pair the costate with the first and second flows of
//! one ensemble. The quadratic check pairs the second field with the outer
//! square of the first flow. The pair-field check runs across two
//! independent replicas and pairs the product field with one flow from each
//! leg; its right side reuses the exact static source the solver
//! integrated, so the two sides share every pooled average down to the
//! floats.

use ndarray::{s, Array1, Array2, Array3};

use crate::adjoint::{
    static_pair_source, FirstAdjoint, SecondAdjoint, ThirdAdjoint, ThirdVariant,
};
use crate::coeffs::{hamiltonian, Coefficients, MomentMap};
use crate::forward::ParticleEnsemble;
use crate::variational::{VariationBundle, VariationFlows};
use crate::{Error, Result};

/// Both sides of one pairing identity and the sampling error of their gap.
#[derive(Debug, Clone)]
pub struct DualityResidual {
    pub lhs: f64,
    pub rhs: f64,
    /// lhs - rhs.
    pub residual: f64,
    /// Standard error of the mean of the per-particle gaps. Row means stand
    /// in for particles when the identity lives on pairs.
    pub paired_stderr: f64,
    /// Spike magnitude of the bundle, recorded for refinement studies.
    pub eps: f64,
}

/// The quadratic pairing with its window term split out. `core.rhs` already
/// contains the quadratic diffusion jump; its unscaled weight is reported
/// separately so scaling experiments can read the dependence off directly.
#[derive(Debug, Clone)]
pub struct PyyBreakdown {
    pub core: DualityResidual,
    /// Time integral of the mean squared diffusion jump against the second
    /// field, at unit jump scale.
    pub spike_quadratic: f64,
}

/// The pair-field pairing. `core` compares the terminal pairing with the
/// static integral alone; the window corrections the full bookkeeping adds
/// are reported next to it instead of being folded in, since they vanish
/// with the window.
#[derive(Debug, Clone)]
pub struct ThirdDualityResidual {
    pub core: DualityResidual,
    /// Pair mean of the drift jumps integrated against the field.
    pub spike_drift: f64,
    /// Pair mean of the diffusion jumps integrated against the martingale
    /// integrands. Identically zero when those integrands are.
    pub spike_diffusion: f64,
    /// Pair mean of the static source integrated against both flows;
    /// `core.rhs` is its negative.
    pub cross_integral: f64,
}

/// One leg of a cross-replica check: the bundle with its solved fields.
#[derive(Debug, Clone, Copy)]
pub struct AdjointStack<'a> {
    pub bundle: &'a VariationBundle,
    pub first: &'a FirstAdjoint,
    pub second: &'a SecondAdjoint,
}

pub(crate) fn ensure_first(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    first: &FirstAdjoint,
) -> Result<()> {
    let dims = model.dims();
    let (n, steps) = (ens.n(), ens.grid.steps());
    if first.p.dim() != (n, steps + 1, dims.d) || first.q.dim() != (n, steps, dims.d, dims.dw) {
        return Err(Error::Dimension(
            "the costate arrays do not match the ensemble".into(),
        ));
    }
    Ok(())
}

pub(crate) fn ensure_second(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    second: &SecondAdjoint,
) -> Result<()> {
    let dims = model.dims();
    let (n, steps) = (ens.n(), ens.grid.steps());
    if second.big_p.dim() != (n, steps + 1, dims.d, dims.d)
        || second.big_q.dim() != (n, steps, dims.dw, dims.d, dims.d)
    {
        return Err(Error::Dimension(
            "the second field arrays do not match the ensemble".into(),
        ));
    }
    Ok(())
}

fn paired_from(lhs: &[f64], rhs: &[f64], eps: f64) -> DualityResidual {
    let n = lhs.len() as f64;
    let lm = lhs.iter().sum::<f64>() / n;
    let rm = rhs.iter().sum::<f64>() / n;
    let residual = lm - rm;
    let mut var = 0.0;
    for (l, r) in lhs.iter().zip(rhs) {
        let gap = (l - r) - residual;
        var += gap * gap;
    }
    let paired_stderr = if lhs.len() > 1 {
        (var / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    DualityResidual {
        lhs: lm,
        rhs: rm,
        residual,
        paired_stderr,
        eps,
    }
}

/// Empirical first and second moment flows at knot k, pooled the same way
/// the flow integrator pools them.
pub(crate) fn pooled_s1_s2(
    map: &MomentMap,
    ens: &ParticleEnsemble,
    y: &Array3<f64>,
    k: usize,
) -> (Array1<f64>, Array1<f64>) {
    let kk = map.k();
    let d = map.d();
    let n = ens.n();
    let mut s1 = Array1::<f64>::zeros(kk);
    let mut s2 = Array1::<f64>::zeros(kk);
    for j in 0..n {
        let xj = ens.state(j, k);
        let dpsi = map.dpsi(xj);
        let d2 = map.d2psi(xj);
        for q in 0..kk {
            let mut dy = 0.0;
            let mut quad = 0.0;
            for a in 0..d {
                dy += dpsi[[q, a]] * y[[j, k, a]];
                for b in 0..d {
                    quad += d2[[q, a, b]] * y[[j, k, a]] * y[[j, k, b]];
                }
            }
            s1[q] += dy;
            s2[q] += quad;
        }
    }
    let inv = 1.0 / n as f64;
    s1.mapv_inplace(|v| v * inv);
    s2.mapv_inplace(|v| v * inv);
    (s1, s2)
}

/// Pooled moment gradient of the running cost at knot k.
pub(crate) fn pooled_cost_gradient(model: &dyn Coefficients, ens: &ParticleEnsemble, k: usize) -> Array1<f64> {
    let kk = model.moment_map().k();
    let t = ens.grid.knot(k);
    let m = ens.moments_at(k);
    let mut fbar = Array1::<f64>::zeros(kk);
    for l in 0..ens.n() {
        fbar += &model.running_cost_m(t, ens.state(l, k), m, ens.control(l, k));
    }
    fbar.mapv_inplace(|v| v / ens.n() as f64);
    fbar
}

/// Coefficient jumps the spiked control produces on cell k of particle i,
/// evaluated on the base path. Zero off the window by construction.
pub(crate) fn control_jump(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    flows: &VariationFlows,
    i: usize,
    k: usize,
) -> (Array1<f64>, Array2<f64>) {
    let t = ens.grid.knot(k);
    let x = ens.state(i, k);
    let m = ens.moments_at(k);
    let u = ens.control(i, k);
    let beta: Vec<f64> = flows.beta.slice(s![i, k, ..]).to_vec();
    let da = &model.drift(t, x, m, &beta) - &model.drift(t, x, m, u);
    let db = &model.diffusion(t, x, m, &beta) - &model.diffusion(t, x, m, u);
    (da, db)
}

/// Terminal pairing of the costate with the first flow. The predicted
/// integrand carries the running-cost gradients with a minus and the
/// control jumps paired against the costate with a plus, so both sides
/// vanish together when the window does nothing.
pub fn check_duality_py(
    model: &dyn Coefficients,
    bundle: &VariationBundle,
    first: &FirstAdjoint,
) -> Result<DualityResidual> {
    ensure_first(model, &bundle.base, first)?;
    let dims = model.dims();
    let map = model.moment_map();
    let (d, kk) = (dims.d, map.k());
    let ens = &bundle.base;
    let n = ens.n();
    let steps = ens.grid.steps();
    let dt = ens.grid.dt();
    let y = &bundle.flows.y;
    let (w0, wlen) = bundle.flows.window;

    let mut rhs = vec![0.0; n];
    for k in 0..steps {
        let t = ens.grid.knot(k);
        let m = ens.moments_at(k);
        let fbar = pooled_cost_gradient(model, ens, k);
        let in_window = k >= w0 && k < w0 + wlen;
        for i in 0..n {
            let x = ens.state(i, k);
            let u = ens.control(i, k);
            let fx = model.running_cost_x(t, x, m, u);
            let dpsi = map.dpsi(x);
            let mut v = 0.0;
            for a in 0..d {
                let mut pull = 0.0;
                for r in 0..kk {
                    pull += dpsi[[r, a]] * fbar[r];
                }
                v += (fx[a] + pull) * y[[i, k, a]];
            }
            if in_window {
                let (da, db) = control_jump(model, ens, &bundle.flows, i, k);
                let p = first.p_at(i, k);
                let q = first.q_at(i, k);
                for a in 0..d {
                    v -= p[a] * da[a];
                    for c in 0..dims.dw {
                        v -= q[[a, c]] * db[[a, c]];
                    }
                }
            }
            rhs[i] -= dt * v;
        }
    }

    let lhs: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|a| first.p[[i, steps, a]] * y[[i, steps, a]]).sum())
        .collect();
    Ok(paired_from(&lhs, &rhs, bundle.eps))
}

/// Terminal pairing of the costate with the second flow. The predicted
/// integrand pays the running-cost gradients on the second flow and collects
/// the quadratic transport sources against the costate; the window terms of
/// the second flow are derivative jumps and are left to the residual, which
/// is why this gap shrinks faster than the window.
pub fn check_duality_pz(
    model: &dyn Coefficients,
    bundle: &VariationBundle,
    first: &FirstAdjoint,
) -> Result<DualityResidual> {
    ensure_first(model, &bundle.base, first)?;
    let dims = model.dims();
    let map = model.moment_map();
    let (d, dw, kk) = (dims.d, dims.dw, map.k());
    let ens = &bundle.base;
    let n = ens.n();
    let steps = ens.grid.steps();
    let dt = ens.grid.dt();
    let y = &bundle.flows.y;
    let z = &bundle.flows.z;

    let mut rhs = vec![0.0; n];
    for k in 0..steps {
        let t = ens.grid.knot(k);
        let m = ens.moments_at(k);
        let (s1, s2) = pooled_s1_s2(map, ens, y, k);
        let fbar = pooled_cost_gradient(model, ens, k);
        for i in 0..n {
            let x = ens.state(i, k);
            let u = ens.control(i, k);
            let fx = model.running_cost_x(t, x, m, u);
            let dpsi = map.dpsi(x);
            let yi: Vec<f64> = (0..d).map(|a| y[[i, k, a]]).collect();

            let mut v = 0.0;
            for a in 0..d {
                let mut pull = 0.0;
                for r in 0..kk {
                    pull += dpsi[[r, a]] * fbar[r];
                }
                v -= (fx[a] + pull) * z[[i, k, a]];
            }

            let a_m = model.drift_m(t, x, m, u);
            let a_xx = model.drift_xx(t, x, m, u);
            let a_xm = model.drift_xm(t, x, m, u);
            let a_mm = model.drift_mm(t, x, m, u);
            let p = first.p_at(i, k);
            for comp in 0..d {
                let mut src = 0.0;
                for q in 0..kk {
                    src += 0.5 * a_m[[comp, q]] * s2[q];
                    for r in 0..kk {
                        src += 0.5 * a_mm[[comp, q, r]] * s1[q] * s1[r];
                    }
                }
                for a in 0..d {
                    for b in 0..d {
                        src += 0.5 * a_xx[[comp, a, b]] * yi[a] * yi[b];
                    }
                    for q in 0..kk {
                        src += a_xm[[comp, a, q]] * yi[a] * s1[q];
                    }
                }
                v += p[comp] * src;
            }

            let b_m = model.diffusion_m(t, x, m, u);
            let b_xx = model.diffusion_xx(t, x, m, u);
            let b_xm = model.diffusion_xm(t, x, m, u);
            let b_mm = model.diffusion_mm(t, x, m, u);
            let q_i = first.q_at(i, k);
            for c in 0..dw {
                for comp in 0..d {
                    let mut src = 0.0;
                    for q in 0..kk {
                        src += 0.5 * b_m[[c, comp, q]] * s2[q];
                        for r in 0..kk {
                            src += 0.5 * b_mm[[c, comp, q, r]] * s1[q] * s1[r];
                        }
                    }
                    for a in 0..d {
                        for b in 0..d {
                            src += 0.5 * b_xx[[c, comp, a, b]] * yi[a] * yi[b];
                        }
                        for q in 0..kk {
                            src += b_xm[[c, comp, a, q]] * yi[a] * s1[q];
                        }
                    }
                    v += q_i[[comp, c]] * src;
                }
            }
            rhs[i] += dt * v;
        }
    }

    let lhs: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|a| first.p[[i, steps, a]] * z[[i, steps, a]]).sum())
        .collect();
    Ok(paired_from(&lhs, &rhs, bundle.eps))
}

/// Quadratic pairing of the second field with the outer square of the first
/// flow, with the diffusion jump entering at scale `db_scale`.
fn pyy_with_scale(
    model: &dyn Coefficients,
    bundle: &VariationBundle,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    db_scale: f64,
) -> Result<PyyBreakdown> {
    ensure_first(model, &bundle.base, first)?;
    ensure_second(model, &bundle.base, second)?;
    let dims = model.dims();
    let map = model.moment_map();
    let (d, dw, kk) = (dims.d, dims.dw, map.k());
    let ens = &bundle.base;
    let n = ens.n();
    let steps = ens.grid.steps();
    let dt = ens.grid.dt();
    let y = &bundle.flows.y;
    let (w0, wlen) = bundle.flows.window;
    let lam2 = db_scale * db_scale;

    let mut rhs = vec![0.0; n];
    let mut window_quad = vec![0.0; n];
    for k in 0..steps {
        let t = ens.grid.knot(k);
        let m = ens.moments_at(k);
        let (s1, _) = pooled_s1_s2(map, ens, y, k);

        // Pooled moment gradient of H and the per-particle state Hessians.
        let mut t1h = Array1::<f64>::zeros(kk);
        let mut hxx = Vec::with_capacity(n);
        for l in 0..n {
            let p = first.p_at(l, k);
            let q = first.q_at(l, k);
            let eval = hamiltonian(model, t, ens.state(l, k), m, ens.control(l, k), &p, q.view())?;
            t1h += &eval.h_m;
            hxx.push(eval.h_xx);
        }
        t1h.mapv_inplace(|v| v / n as f64);

        let in_window = k >= w0 && k < w0 + wlen;
        for i in 0..n {
            let x = ens.state(i, k);
            let u = ens.control(i, k);
            let yi: Vec<f64> = (0..d).map(|a| y[[i, k, a]]).collect();
            let d2 = map.d2psi(x);
            let a_m = model.drift_m(t, x, m, u);
            let b_m = model.diffusion_m(t, x, m, u);
            let b_x = model.diffusion_x(t, x, m, u);
            let p2 = second.p_at(i, k);

            let mut v = 0.0;
            for a in 0..d {
                for b in 0..d {
                    let mut w = hxx[i][[a, b]];
                    for r in 0..kk {
                        w += t1h[r] * d2[[r, a, b]];
                    }
                    v -= w * yi[a] * yi[b];
                }
            }

            // Measure drift of the first flow, per component and channel.
            let mut ma = vec![0.0; d];
            let mut mb = Array2::<f64>::zeros((d, dw));
            let mut bxy = Array2::<f64>::zeros((d, dw));
            for comp in 0..d {
                for q in 0..kk {
                    ma[comp] += a_m[[comp, q]] * s1[q];
                }
                for c in 0..dw {
                    for q in 0..kk {
                        mb[[comp, c]] += b_m[[c, comp, q]] * s1[q];
                    }
                    for a in 0..d {
                        bxy[[comp, c]] += b_x[[c, comp, a]] * yi[a];
                    }
                }
            }

            for a in 0..d {
                for b in 0..d {
                    let mut w = ma[a] * yi[b] + yi[a] * ma[b];
                    for c in 0..dw {
                        w += bxy[[a, c]] * mb[[b, c]]
                            + mb[[a, c]] * mb[[b, c]]
                            + mb[[a, c]] * bxy[[b, c]];
                    }
                    v += p2[[a, b]] * w;
                }
            }
            for c in 0..dw {
                let q2 = second.q_at(i, k, c);
                for a in 0..d {
                    for b in 0..d {
                        v += q2[[a, b]] * (mb[[a, c]] * yi[b] + yi[a] * mb[[b, c]]);
                    }
                }
            }

            if in_window {
                let (_, db) = control_jump(model, ens, &bundle.flows, i, k);
                let mut quad = 0.0;
                for c in 0..dw {
                    for a in 0..d {
                        for b in 0..d {
                            quad += db[[a, c]] * p2[[a, b]] * db[[b, c]];
                        }
                    }
                }
                window_quad[i] += dt * quad;
                v += lam2 * quad;
            }
            rhs[i] += dt * v;
        }
    }

    let lhs: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    acc += second.big_p[[i, steps, a, b]] * y[[i, steps, a]] * y[[i, steps, b]];
                }
            }
            acc
        })
        .collect();
    let spike_quadratic = window_quad.iter().sum::<f64>() / n as f64;
    Ok(PyyBreakdown {
        core: paired_from(&lhs, &rhs, bundle.eps),
        spike_quadratic,
    })
}

pub fn check_duality_pyy(
    model: &dyn Coefficients,
    bundle: &VariationBundle,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
) -> Result<PyyBreakdown> {
    pyy_with_scale(model, bundle, first, second, 1.0)
}

/// Same pairing with the diffusion jump rescaled. The predicted side moves
/// by exactly (scale^2 - 1) times the reported quadratic window term and by
/// nothing else, which separates that term from everything the flows carry.
pub fn check_duality_pyy_scaled(
    model: &dyn Coefficients,
    bundle: &VariationBundle,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    db_scale: f64,
) -> Result<PyyBreakdown> {
    pyy_with_scale(model, bundle, first, second, db_scale)
}

fn third_with_scale(
    model: &dyn Coefficients,
    slot1: AdjointStack<'_>,
    slot2: AdjointStack<'_>,
    third: &ThirdAdjoint,
    db_scale: f64,
) -> Result<ThirdDualityResidual> {
    let ens1 = &slot1.bundle.base;
    let ens2 = &slot2.bundle.base;
    if ens1.seed == ens2.seed {
        return Err(Error::Independence(
            "the two legs grew from the same seed, so their noises are not independent".into(),
        ));
    }
    if ens1.n() != ens2.n()
        || ens1.grid.steps() != ens2.grid.steps()
        || (ens1.grid.dt() - ens2.grid.dt()).abs() > 1e-12 * ens1.grid.dt()
    {
        return Err(Error::Argument(
            "the two legs must share the particle count and time grid".into(),
        ));
    }
    if slot1.bundle.eps != slot2.bundle.eps {
        return Err(Error::Argument(
            "the two legs must carry the same spike magnitude".into(),
        ));
    }
    ensure_first(model, ens1, slot1.first)?;
    ensure_second(model, ens1, slot1.second)?;
    ensure_first(model, ens2, slot2.first)?;
    ensure_second(model, ens2, slot2.second)?;

    let dims = model.dims();
    let (d, dw) = (dims.d, dims.dw);
    let n = ens1.n();
    let steps = ens1.grid.steps();
    let dt = ens1.grid.dt();
    let sel = &third.indices;
    let s = sel.len();
    if third.pp.dim() != (s, s, steps + 1, d, d) {
        return Err(Error::Dimension(
            "the pair field does not match the ensembles".into(),
        ));
    }
    if sel.iter().any(|&l| l >= n) {
        return Err(Error::Argument(
            "the pair field indexes particles outside the ensembles".into(),
        ));
    }

    let symmetric = third.variant == ThirdVariant::Symmetrized;
    let source = static_pair_source(
        model,
        ens1,
        slot1.first,
        slot1.second,
        ens2,
        slot2.first,
        slot2.second,
        sel,
        symmetric,
    )?;

    let y1 = &slot1.bundle.flows.y;
    let y2 = &slot2.bundle.flows.y;

    let mut lhs = Array2::<f64>::zeros((s, s));
    let mut ci = Array2::<f64>::zeros((s, s));
    for (ii, &i) in sel.iter().enumerate() {
        for (jj, &j) in sel.iter().enumerate() {
            let mut tp = 0.0;
            for a in 0..d {
                for b in 0..d {
                    tp += y1[[i, steps, a]] * third.pp[[ii, jj, steps, a, b]] * y2[[j, steps, b]];
                }
            }
            lhs[[ii, jj]] = tp;
            let mut acc = 0.0;
            for k in 0..steps {
                for a in 0..d {
                    for b in 0..d {
                        acc += y1[[i, k, a]] * source[[ii, jj, k, a, b]] * y2[[j, k, b]];
                    }
                }
            }
            ci[[ii, jj]] = dt * acc;
        }
    }

    // Window corrections: drift jumps pair with the field itself, diffusion
    // jumps with the matching martingale integrand, each on its own leg.
    let mut spike_drift = 0.0;
    let mut spike_diffusion = 0.0;
    let (w0, wlen) = slot1.bundle.flows.window;
    for k in w0..w0 + wlen {
        let jumps: Vec<(Array1<f64>, Array2<f64>)> = sel
            .iter()
            .map(|&i| control_jump(model, ens1, &slot1.bundle.flows, i, k))
            .collect();
        for (ii, (da, db)) in jumps.iter().enumerate() {
            for (jj, &j) in sel.iter().enumerate() {
                for b in 0..d {
                    let yb = y2[[j, k, b]];
                    for a in 0..d {
                        spike_drift += dt * da[a] * third.pp[[ii, jj, k, a, b]] * yb;
                        for c in 0..dw {
                            spike_diffusion += dt
                                * db_scale
                                * db[[a, c]]
                                * third.psi1[[ii, jj, k, c, a, b]]
                                * yb;
                        }
                    }
                }
            }
        }
    }
    let (w0, wlen) = slot2.bundle.flows.window;
    for k in w0..w0 + wlen {
        let jumps: Vec<(Array1<f64>, Array2<f64>)> = sel
            .iter()
            .map(|&j| control_jump(model, ens2, &slot2.bundle.flows, j, k))
            .collect();
        for (ii, &i) in sel.iter().enumerate() {
            for (jj, (da, db)) in jumps.iter().enumerate() {
                for a in 0..d {
                    let ya = y1[[i, k, a]];
                    for b in 0..d {
                        spike_drift += dt * ya * third.pp[[ii, jj, k, a, b]] * da[b];
                        for c in 0..dw {
                            spike_diffusion += dt
                                * db_scale
                                * ya
                                * third.psi2[[ii, jj, k, c, a, b]]
                                * db[[b, c]];
                        }
                    }
                }
            }
        }
    }
    let pairs = (s * s) as f64;
    spike_drift /= pairs;
    spike_diffusion /= pairs;

    let lhs_mean = lhs.iter().sum::<f64>() / pairs;
    let ci_mean = ci.iter().sum::<f64>() / pairs;
    let residual = lhs_mean + ci_mean;
    // The n^2 pair terms hold about n independent draws; summarise the gap
    // over row means so the stderr carries the honest count.
    let mut row_gaps = Vec::with_capacity(s);
    for ii in 0..s {
        let mut acc = 0.0;
        for jj in 0..s {
            acc += lhs[[ii, jj]] + ci[[ii, jj]];
        }
        row_gaps.push(acc / s as f64);
    }
    let mut var = 0.0;
    for g in &row_gaps {
        var += (g - residual) * (g - residual);
    }
    let paired_stderr = if s > 1 {
        (var / (s as f64 - 1.0) / s as f64).sqrt()
    } else {
        0.0
    };

    Ok(ThirdDualityResidual {
        core: DualityResidual {
            lhs: lhs_mean,
            rhs: -ci_mean,
            residual,
            paired_stderr,
            eps: slot1.bundle.eps,
        },
        spike_drift,
        spike_diffusion,
        cross_integral: ci_mean,
    })
}

/// Cross-replica pairing of the pair field with one first flow from each
/// leg. The legs must be statistically independent; sharing a seed is
/// rejected rather than silently producing an optimistic gap.
pub fn check_duality_third(
    model: &dyn Coefficients,
    slot1: AdjointStack<'_>,
    slot2: AdjointStack<'_>,
    third: &ThirdAdjoint,
) -> Result<ThirdDualityResidual> {
    third_with_scale(model, slot1, slot2, third, 1.0)
}

/// Same pairing with the diffusion jumps rescaled. The static side does not
/// contain them, so `core` is unchanged by construction and only the
/// martingale window correction moves.
pub fn check_duality_third_scaled(
    model: &dyn Coefficients,
    slot1: AdjointStack<'_>,
    slot2: AdjointStack<'_>,
    third: &ThirdAdjoint,
    db_scale: f64,
) -> Result<ThirdDualityResidual> {
    third_with_scale(model, slot1, slot2, third, db_scale)
}
