//! Second-order expansion of the cost gap produced by a spike.
//!
//! The Monte Carlo gap J(spiked) - J(base) is matched against three
//! successively condensed predictions built from the same paths:
//!
//! * a raw Taylor form in the flows, using only cost derivatives,
//! * a Hamiltonian form, where the costate has absorbed the linear terms,
//! * a pair form, where the pair field has absorbed the quadratic
//!   mean-field terms, leaving the window jump of the Hamiltonian plus the
//!   quadratic diffusion pickup.
//!
//! The final form is the right-hand side the maximum principle integrates,
//! so the headline numbers are `lhs`, `rhs` and their paired residual. The
//! intermediate forms are exposed for term-level debugging: each
//! condensation step is a duality relation, and when one of the duality
//! checks drifts, the gaps below show which step lost the mass.

use ndarray::{s, Array1};

use super::cost::pathwise_cost;
use super::duality::{control_jump, ensure_first, ensure_second, pooled_s1_s2, AdjointStack};
use crate::adjoint::{static_pair_source, ThirdAdjoint, ThirdVariant};
use crate::coeffs::{hamiltonian, hamiltonian_value, Coefficients};
use crate::{Error, Result};

/// Every level of the expansion on one spiked pair of replicas.
///
/// All forms are means over the first leg; the pair form additionally
/// averages over the selected particle pairs of both legs. The gaps are
/// statistical except `gap_closure`, which is an algebraic identity on the
/// assembled arrays and stays at float precision.
#[derive(Debug, Clone, Copy)]
pub struct ExpansionReport {
    /// Spike magnitude the legs were built with.
    pub eps: f64,
    /// Monte Carlo cost gap between the spiked and the base replica.
    pub lhs: f64,
    /// Hamiltonian window jump plus the quadratic diffusion pickup.
    pub rhs: f64,
    /// lhs - rhs.
    pub residual: f64,
    /// residual / eps; under refinement of eps this should fall.
    pub residual_over_eps: f64,
    /// Paired standard error of the per-particle gap behind `residual`.
    pub stderr: f64,
    /// Full second-order Taylor form in the flows, cost derivatives only.
    pub taylor_form: f64,
    /// Costate-condensed form: the linear terms dualized away.
    pub hamiltonian_form: f64,
    /// Pair-condensed form: the quadratic mean-field terms dualized away.
    pub pair_form: f64,
    /// hamiltonian_form - taylor_form.
    pub gap_taylor: f64,
    /// pair_form - hamiltonian_form.
    pub gap_pair: f64,
    /// (pair_form - rhs) - (cross_integral + terminal_pairing) / 2.
    pub gap_closure: f64,
    /// Time integral of the pair source against both flow legs.
    pub cross_integral: f64,
    /// Terminal pair field against both terminal flows.
    pub terminal_pairing: f64,
}

/// Runs the whole cascade on two independent legs.
///
/// The first leg carries every single-distribution form; the second leg
/// only enters through the pair field, which needs genuinely independent
/// copies to mean anything. `third` must have been solved on these legs.
pub fn check_expansion(
    model: &dyn Coefficients,
    slot1: AdjointStack<'_>,
    slot2: AdjointStack<'_>,
    third: &ThirdAdjoint,
) -> Result<ExpansionReport> {
    let ens = &slot1.bundle.base;
    let ens2 = &slot2.bundle.base;
    if ens.seed == ens2.seed {
        return Err(Error::Independence(
            "the two legs grew from the same seed, so their noises are not independent".into(),
        ));
    }
    if ens.n() != ens2.n()
        || ens.grid.steps() != ens2.grid.steps()
        || (ens.grid.dt() - ens2.grid.dt()).abs() > 1e-12 * ens.grid.dt()
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
    ensure_first(model, ens, slot1.first)?;
    ensure_second(model, ens, slot1.second)?;
    ensure_first(model, ens2, slot2.first)?;
    ensure_second(model, ens2, slot2.second)?;

    let dims = model.dims();
    let map = model.moment_map();
    let (d, dw, kk) = (dims.d, dims.dw, map.k());
    let n = ens.n();
    let steps = ens.grid.steps();
    let dt = ens.grid.dt();
    let eps = slot1.bundle.eps;
    let sel = &third.indices;
    let ns = sel.len();
    if third.pp.dim() != (ns, ns, steps + 1, d, d) {
        return Err(Error::Dimension(
            "the pair field does not match the ensembles".into(),
        ));
    }
    if sel.iter().any(|&l| l >= n) {
        return Err(Error::Argument(
            "the pair field indexes particles outside the ensembles".into(),
        ));
    }

    let flows = &slot1.bundle.flows;
    let y = &flows.y;
    let z = &flows.z;
    let (w0, wlen) = flows.window;
    let inv = 1.0 / n as f64;

    // Per-particle window integral of dH + 0.5 <P, dB dB^T>, the integrand
    // of the final form, kept per particle so the Monte Carlo gap can be
    // paired against it path by path.
    let mut d33 = vec![0.0; n];
    // Window Hamiltonian jump alone, for the Hamiltonian form.
    let mut dh_sum = 0.0;
    // Zero-mean window kicks subtracted from the Monte Carlo side.
    let mut cvs = vec![0.0; n];
    // Leg-long accumulation of the Taylor and Hamiltonian forms.
    let mut taylor = 0.0;
    let mut ham = 0.0;

    for k in 0..steps {
        let t = ens.grid.knot(k);
        let m = ens.moments_at(k);
        let (s1, s2) = pooled_s1_s2(map, ens, y, k);
        let s1z = pooled_s1_s2(map, ens, z, k).0;

        let mut lin = 0.0; // f_x against Y + Z
        let mut fq = 0.0; // quadratic cost blocks
        let mut hq = 0.0; // quadratic Hamiltonian blocks
        let mut dfj = 0.0; // running-cost jump on the window
        let mut fbar = Array1::<f64>::zeros(kk); // pooled f_m
        let mut t1h = Array1::<f64>::zeros(kk); // pooled H_m
        let in_window = k >= w0 && k < w0 + wlen;

        for i in 0..n {
            let x = ens.state(i, k);
            let u = ens.control(i, k);
            let p = slot1.first.p_at(i, k);
            let q = slot1.first.q_at(i, k);
            let h = hamiltonian(model, t, x, m, u, &p, q.view())?;
            let fx = model.running_cost_x(t, x, m, u);
            let fxx = model.running_cost_xx(t, x, m, u);
            let fxm = model.running_cost_xm(t, x, m, u);
            let fmm = model.running_cost_mm(t, x, m, u);
            fbar += &model.running_cost_m(t, x, m, u);
            t1h += &h.h_m;

            for a in 0..d {
                let ya = y[[i, k, a]];
                lin += fx[a] * (ya + z[[i, k, a]]);
                for b in 0..d {
                    let yy = ya * y[[i, k, b]];
                    fq += 0.5 * fxx[[a, b]] * yy;
                    hq += 0.5 * h.h_xx[[a, b]] * yy;
                }
                for r in 0..kk {
                    fq += fxm[[a, r]] * ya * s1[r];
                    hq += h.h_xm[[a, r]] * ya * s1[r];
                }
            }
            for r in 0..kk {
                for c in 0..kk {
                    let ss = s1[r] * s1[c];
                    fq += 0.5 * fmm[[r, c]] * ss;
                    hq += 0.5 * h.h_mm[[r, c]] * ss;
                }
            }

            if in_window {
                let beta: Vec<f64> = flows.beta.slice(s![i, k, ..]).to_vec();
                dfj += model.running_cost(t, x, m, &beta) - model.running_cost(t, x, m, u);
                let dh = hamiltonian_value(model, t, x, m, &beta, &p, q.view()) - h.value;
                let (_, db) = control_jump(model, ens, flows, i, k);
                let bp = slot1.second.p_at(i, k);
                let mut quad = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        let mut cov = 0.0;
                        for c in 0..dw {
                            cov += db[[a, c]] * db[[b, c]];
                        }
                        quad += bp[[a, b]] * cov;
                    }
                }
                d33[i] += dt * (dh + 0.5 * quad);
                dh_sum += dt * dh;

                // A diffusion jump feeds the increment straight into the
                // path, so the paired cost gap carries a zero-mean kick of
                // order sqrt(eps) that no pairing can cancel. Both kick
                // terms below have exactly zero mean given the left knot,
                // so subtracting them from the Monte Carlo side is a pure
                // variance reduction.
                let mut kick = [0.0; 8];
                debug_assert!(d <= 8, "state dimension exceeds the kick buffer");
                for (a, ka) in kick.iter_mut().enumerate().take(d) {
                    for c in 0..dw {
                        *ka += db[[a, c]] * ens.dw[[i, k, c]];
                    }
                }
                let mut lin_kick = 0.0;
                let mut quad_kick = 0.0;
                for a in 0..d {
                    lin_kick += p[a] * kick[a];
                    for b in 0..d {
                        quad_kick += bp[[a, b]] * kick[a] * kick[b];
                    }
                }
                cvs[i] += lin_kick + 0.5 * (quad_kick - dt * quad);
            }
        }

        // Tilde pulls: the pooled gradients against the pooled flow moments.
        let mut pull34 = 0.0;
        let mut pull35 = 0.0;
        for r in 0..kk {
            pull34 += fbar[r] * inv * (s1[r] + s1z[r] + 0.5 * s2[r]);
            pull35 += 0.5 * t1h[r] * inv * s2[r];
        }
        taylor += dt * ((lin + fq + dfj) * inv + pull34);
        ham += dt * (hq * inv + pull35);
    }
    let dh_quad_mean = d33.iter().sum::<f64>() * inv;
    ham += dh_sum * inv;

    // Terminal blocks. The linear ones only feed the Taylor form; the
    // quadratic ones survive into the Hamiltonian form unchanged.
    {
        let m = ens.moments_at(steps);
        let (s1, s2) = pooled_s1_s2(map, ens, y, steps);
        let s1z = pooled_s1_s2(map, ens, z, steps).0;
        let mut glin = 0.0;
        let mut gq = 0.0;
        let mut gbar = Array1::<f64>::zeros(kk);
        for i in 0..n {
            let x = ens.state(i, steps);
            let gx = model.terminal_cost_x(x, m);
            let gxx = model.terminal_cost_xx(x, m);
            let gxm = model.terminal_cost_xm(x, m);
            let gmm = model.terminal_cost_mm(x, m);
            gbar += &model.terminal_cost_m(x, m);
            for a in 0..d {
                let ya = y[[i, steps, a]];
                glin += gx[a] * (ya + z[[i, steps, a]]);
                for b in 0..d {
                    gq += 0.5 * gxx[[a, b]] * ya * y[[i, steps, b]];
                }
                for r in 0..kk {
                    gq += gxm[[a, r]] * ya * s1[r];
                }
            }
            for r in 0..kk {
                for c in 0..kk {
                    gq += 0.5 * gmm[[r, c]] * s1[r] * s1[c];
                }
            }
        }
        let mut pull_lin = 0.0;
        let mut pull_quad = 0.0;
        for r in 0..kk {
            pull_lin += gbar[r] * inv * (s1[r] + s1z[r]);
            pull_quad += 0.5 * gbar[r] * inv * s2[r];
        }
        taylor += (glin + gq) * inv + pull_lin + pull_quad;
        ham += gq * inv + pull_quad;
    }

    // Pair form: the final form plus half the pair-field content, assembled
    // from the exact arrays the pair solver integrated. The separate
    // cross_integral and terminal_pairing accumulators walk the same floats
    // in a different order, so gap_closure measures pure bookkeeping.
    let symmetric = third.variant == ThirdVariant::Symmetrized;
    let source = static_pair_source(
        model,
        ens,
        slot1.first,
        slot1.second,
        ens2,
        slot2.first,
        slot2.second,
        sel,
        symmetric,
    )?;
    let y2 = &slot2.bundle.flows.y;
    let mut pair_excess = 0.0;
    let mut ci = 0.0;
    let mut tg = 0.0;
    for (ii, &i) in sel.iter().enumerate() {
        for (jj, &j) in sel.iter().enumerate() {
            let mut run = 0.0;
            for k in 0..steps {
                for a in 0..d {
                    for b in 0..d {
                        run += y[[i, k, a]] * source[[ii, jj, k, a, b]] * y2[[j, k, b]];
                    }
                }
            }
            let mut term = 0.0;
            for a in 0..d {
                for b in 0..d {
                    term += y[[i, steps, a]] * third.pp[[ii, jj, steps, a, b]] * y2[[j, steps, b]];
                }
            }
            ci += dt * run;
            tg += term;
            pair_excess += 0.5 * (dt * run + term);
        }
    }
    let pinv = 1.0 / (ns * ns) as f64;
    ci *= pinv;
    tg *= pinv;
    pair_excess *= pinv;
    let pair_form = dh_quad_mean + pair_excess;

    // Monte Carlo side, paired per particle against the final form.
    let base_cost = pathwise_cost(model, ens)?;
    let spike_cost = pathwise_cost(model, &slot1.bundle.spiked)?;
    let mut lhs = 0.0;
    let mut var = 0.0;
    for i in 0..n {
        lhs += spike_cost[i] - base_cost[i] - cvs[i];
    }
    lhs *= inv;
    let rhs = dh_quad_mean;
    let residual = lhs - rhs;
    for i in 0..n {
        let gap = (spike_cost[i] - base_cost[i] - cvs[i] - d33[i]) - residual;
        var += gap * gap;
    }
    let stderr = if n > 1 {
        (var / (n as f64 - 1.0) * inv).sqrt()
    } else {
        0.0
    };

    Ok(ExpansionReport {
        eps,
        lhs,
        rhs,
        residual,
        residual_over_eps: residual / eps,
        stderr,
        taylor_form: taylor,
        hamiltonian_form: ham,
        pair_form,
        gap_taylor: ham - taylor,
        gap_pair: pair_form - ham,
        gap_closure: (pair_form - rhs) - 0.5 * (ci + tg),
        cross_integral: ci,
        terminal_pairing: tg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{
        solve_first, solve_second, solve_third, Backend, FirstAdjointSettings, PairSelection,
        SecondAdjointSettings, ThirdAdjointSettings,
    };
    use crate::coeffs::{Tp1, Tp2};
    use crate::forward::{ControlLaw, SpikeVariation, TimeGrid};
    use crate::variational::{build_bundle, VariationBundle};
    use crate::riccati::Tp1Riccati;

    struct Leg {
        bundle: VariationBundle,
        first: crate::adjoint::FirstAdjoint,
        second: crate::adjoint::SecondAdjoint,
    }

    impl Leg {
        fn stack(&self) -> AdjointStack<'_> {
            AdjointStack {
                bundle: &self.bundle,
                first: &self.first,
                second: &self.second,
            }
        }
    }

    fn det_first() -> FirstAdjointSettings {
        FirstAdjointSettings {
            backend: Backend::Deterministic,
            ..Default::default()
        }
    }

    fn det_second() -> SecondAdjointSettings {
        SecondAdjointSettings {
            backend: Backend::Deterministic,
            ..Default::default()
        }
    }

    fn leg(
        model: &dyn Coefficients,
        law: &ControlLaw,
        spike: &SpikeVariation,
        n: usize,
        m: usize,
        seed: u64,
    ) -> Leg {
        let grid = TimeGrid::new(1.0, m).unwrap();
        let bundle = build_bundle(model, &grid, law, spike, &[1.0], 0.5, n, seed).unwrap();
        let first = solve_first(model, &bundle.base, &det_first()).unwrap();
        let second = solve_second(model, &bundle.base, &first, &det_second()).unwrap();
        Leg {
            bundle,
            first,
            second,
        }
    }

    fn det_third(pairs: PairSelection) -> ThirdAdjointSettings {
        ThirdAdjointSettings {
            backend: Backend::Deterministic,
            pairs,
            ..Default::default()
        }
    }

    #[test]
    fn a_null_spike_zeroes_every_form() {
        let model = Tp1::default();
        let law = ControlLaw::constant(&[0.2]);
        let spike = SpikeVariation::new(0.3, 0.1, ControlLaw::constant(&[0.2]));
        let l1 = leg(&model, &law, &spike, 16, 10, 2024);
        let l2 = leg(&model, &law, &spike, 16, 10, 9001);
        let third = solve_third(
            &model,
            &l1.bundle.base,
            &l1.first,
            &l1.second,
            &l2.bundle.base,
            &l2.first,
            &l2.second,
            &det_third(PairSelection::Dense),
        )
        .unwrap();
        let rep = check_expansion(&model, l1.stack(), l2.stack(), &third).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs, 0.0);
        assert_eq!(rep.residual, 0.0);
        assert_eq!(rep.residual_over_eps, 0.0);
        assert_eq!(rep.taylor_form, 0.0);
        assert_eq!(rep.hamiltonian_form, 0.0);
        assert_eq!(rep.pair_form, 0.0);
        assert_eq!(rep.cross_integral, 0.0);
        assert_eq!(rep.terminal_pairing, 0.0);
        assert_eq!(rep.gap_closure, 0.0);
    }

    #[test]
    fn the_bookkeeping_identity_balances_to_float_precision() {
        let model = Tp2::default();
        let law = ControlLaw::constant(&[1.0]);
        let spike = SpikeVariation::new(0.3, 0.1, ControlLaw::constant(&[-1.0]));
        let l1 = leg(&model, &law, &spike, 128, 50, 2024);
        let l2 = leg(&model, &law, &spike, 128, 50, 9001);
        let third = solve_third(
            &model,
            &l1.bundle.base,
            &l1.first,
            &l1.second,
            &l2.bundle.base,
            &l2.first,
            &l2.second,
            &det_third(PairSelection::Dense),
        )
        .unwrap();
        let rep = check_expansion(&model, l1.stack(), l2.stack(), &third).unwrap();
        let scale = rep.pair_form.abs().max(1.0);
        assert!(
            rep.gap_closure.abs() <= 1e-10 * scale,
            "closure gap {:+.3e} against scale {:.3e}",
            rep.gap_closure,
            scale
        );
        // The pair field should actually carry mass here, otherwise the
        // identity is balancing zeros.
        assert!(rep.cross_integral.abs() > 1e-8);
        assert!(rep.terminal_pairing.abs() > 1e-8);
    }

    #[test]
    fn the_remainder_shrinks_superlinearly_in_the_window() {
        let model = Tp2::default();
        let law = ControlLaw::constant(&[1.0]);
        let mut slopes = Vec::new();
        for &eps in &[0.1, 0.05, 0.025] {
            let spike = SpikeVariation::new(1.0 - eps, eps, ControlLaw::constant(&[-1.0]));
            let l1 = leg(&model, &law, &spike, 512, 200, 2024);
            let l2 = leg(&model, &law, &spike, 512, 200, 9001);
            let third = solve_third(
                &model,
                &l1.bundle.base,
                &l1.first,
                &l1.second,
                &l2.bundle.base,
                &l2.first,
                &l2.second,
                &det_third(PairSelection::Subsample { count: 48 }),
            )
            .unwrap();
            let rep = check_expansion(&model, l1.stack(), l2.stack(), &third).unwrap();
            slopes.push(rep.residual_over_eps.abs());
        }
        assert!(
            slopes[0] > slopes[1] && slopes[1] > slopes[2],
            "normalized remainders {:?} should fall strictly",
            slopes
        );
    }

    #[test]
    fn an_optimal_control_cannot_be_improved_at_first_order() {
        let model = Tp1::default();
        let riccati = Tp1Riccati::solve(&model, 1.0, 4000);
        let law = riccati.feedback_law();
        let spike = SpikeVariation::new(0.3, 0.05, ControlLaw::constant(&[-0.5]));
        let l1 = leg(&model, &law, &spike, 512, 100, 2024);
        let l2 = leg(&model, &law, &spike, 512, 100, 9001);
        let third = solve_third(
            &model,
            &l1.bundle.base,
            &l1.first,
            &l1.second,
            &l2.bundle.base,
            &l2.first,
            &l2.second,
            &det_third(PairSelection::Subsample { count: 64 }),
        )
        .unwrap();
        let rep = check_expansion(&model, l1.stack(), l2.stack(), &third).unwrap();
        assert!(
            rep.lhs >= -3.0 * rep.stderr,
            "spiking an optimal control lowered the cost: lhs {:+.3e}, stderr {:.3e}",
            rep.lhs,
            rep.stderr
        );
        assert!(
            rep.residual.abs() <= 3.0 * rep.stderr + 0.02 * rep.lhs.abs(),
            "residual {:+.3e} vs stderr {:.3e}, lhs {:+.3e}",
            rep.residual,
            rep.stderr,
            rep.lhs
        );
    }

    #[test]
    fn the_legs_must_be_independent() {
        let model = Tp1::default();
        let law = ControlLaw::constant(&[0.2]);
        let spike = SpikeVariation::new(0.3, 0.1, ControlLaw::constant(&[-0.5]));
        let l1 = leg(&model, &law, &spike, 12, 10, 2024);
        let l2 = leg(&model, &law, &spike, 12, 10, 9001);
        let third = solve_third(
            &model,
            &l1.bundle.base,
            &l1.first,
            &l1.second,
            &l2.bundle.base,
            &l2.first,
            &l2.second,
            &det_third(PairSelection::Dense),
        )
        .unwrap();
        let err = check_expansion(&model, l1.stack(), l1.stack(), &third).unwrap_err();
        assert!(matches!(err, Error::Independence(_)));
    }
}
