//! First and second variation flows along a simulated base ensemble.
//!
//! Both flows ride on the base paths and the base noise. The first one is
//! linear and picks up the raw coefficient jump on the spike window; the
//! second collects the quadratic corrections, the measure corrections built
//! from the moment map, and the jump of the coefficient derivatives.

use ndarray::{Array3, Axis};

use crate::coeffs::Coefficients;
use crate::forward::{apply_spike, simulate_with_increments, ControlLaw, ParticleEnsemble,
    SpikeVariation, TimeGrid};
use crate::forward::rng;
use crate::{Error, Result};

/// The two correction flows, shaped like the state paths: (n, steps + 1, d).
#[derive(Debug, Clone)]
pub struct VariationFlows {
    pub y: Array3<f64>,
    pub z: Array3<f64>,
    /// First cell index of the spike window and its width in cells.
    pub window: (usize, usize),
    /// (n, steps, du): the control the spiked leg emits on each cell,
    /// evaluated on the base paths. Equals the base control off the window,
    /// so coefficient jumps can be recovered exactly from this array.
    pub beta: Array3<f64>,
}

/// Base run, spiked run on the same noise, and the correction flows.
#[derive(Debug, Clone)]
pub struct VariationBundle {
    pub base: ParticleEnsemble,
    pub spiked: ParticleEnsemble,
    pub flows: VariationFlows,
    pub eps: f64,
}

impl VariationBundle {
    /// spiked minus base state paths.
    pub fn delta_x(&self) -> Array3<f64> {
        &self.spiked.states - &self.base.states
    }
}

/// Integrates the variation flows along `base`, spiking with `spike.beta`
/// on the window. Coefficient derivatives are evaluated on the base paths
/// with the controls the base run actually emitted.
pub fn variation_flows(
    model: &dyn Coefficients,
    base: &ParticleEnsemble,
    spike: &SpikeVariation,
) -> Result<VariationFlows> {
    let dims = model.dims();
    let map = model.moment_map();
    let grid = &base.grid;
    let n = base.n();
    let steps = grid.steps();
    let d = dims.d;
    let kk = map.k();
    let dt = grid.dt();

    let start = grid.index_of(spike.t0)?;
    let cells = grid.cells_for(spike.eps)?;
    if start + cells > steps {
        return Err(Error::Argument(format!(
            "spike window [{}, {}) leaves the horizon",
            spike.t0,
            spike.t0 + spike.eps
        )));
    }
    spike.beta.validate(n, steps, dims.du)?;

    let mut y: Array3<f64> = Array3::zeros((n, steps + 1, d));
    let mut z: Array3<f64> = Array3::zeros((n, steps + 1, d));
    let mut beta_emitted = base.controls.clone();

    let mut s1 = vec![0.0; kk];
    let mut s1z = vec![0.0; kk];
    let mut s2 = vec![0.0; kk];
    for k in 0..steps {
        let t = grid.knot(k);
        let m = base.moments_at(k);
        let in_window = k >= start && k < start + cells;

        // Serial copy averages shared by every particle this step.
        s1.iter_mut().for_each(|v| *v = 0.0);
        s1z.iter_mut().for_each(|v| *v = 0.0);
        s2.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let xj = base.state(j, k);
            let dpsi = map.dpsi(xj);
            let d2psi = map.d2psi(xj);
            for q in 0..kk {
                let mut dy = 0.0;
                let mut dz = 0.0;
                let mut quad = 0.0;
                for a in 0..d {
                    dy += dpsi[[q, a]] * y[[j, k, a]];
                    dz += dpsi[[q, a]] * z[[j, k, a]];
                    for b in 0..d {
                        quad += d2psi[[q, a, b]] * y[[j, k, a]] * y[[j, k, b]];
                    }
                }
                s1[q] += dy;
                s1z[q] += dz;
                s2[q] += quad;
            }
        }
        let inv = 1.0 / n as f64;
        s1.iter_mut().for_each(|v| *v *= inv);
        s1z.iter_mut().for_each(|v| *v *= inv);
        s2.iter_mut().for_each(|v| *v *= inv);

        for i in 0..n {
            let x = base.state(i, k);
            let u = base.control(i, k);
            let a_x = model.drift_x(t, x, m, u);
            let a_m = model.drift_m(t, x, m, u);
            let a_xx = model.drift_xx(t, x, m, u);
            let a_xm = model.drift_xm(t, x, m, u);
            let a_mm = model.drift_mm(t, x, m, u);
            let b_x = model.diffusion_x(t, x, m, u);
            let b_m = model.diffusion_m(t, x, m, u);
            let b_xx = model.diffusion_xx(t, x, m, u);
            let b_xm = model.diffusion_xm(t, x, m, u);
            let b_mm = model.diffusion_mm(t, x, m, u);

            // Coefficient jumps on the window; empty outside it.
            let jump = if in_window {
                let beta = spike.beta.value(i, k, t, x, m);
                if !model.control_set().contains(&beta) {
                    return Err(Error::Control(format!(
                        "spike emitted {beta:?} outside the admissible set at step {k}"
                    )));
                }
                for (j, v) in beta.iter().enumerate() {
                    beta_emitted[[i, k, j]] = *v;
                }
                let da = &model.drift(t, x, m, &beta) - &model.drift(t, x, m, u);
                let db = &model.diffusion(t, x, m, &beta) - &model.diffusion(t, x, m, u);
                let da_x = &model.drift_x(t, x, m, &beta) - &a_x;
                let da_m = &model.drift_m(t, x, m, &beta) - &a_m;
                let db_x = &model.diffusion_x(t, x, m, &beta) - &b_x;
                let db_m = &model.diffusion_m(t, x, m, &beta) - &b_m;
                Some((da, db, da_x, da_m, db_x, db_m))
            } else {
                None
            };

            for comp in 0..d {
                let yi = y.index_axis(Axis(0), i);
                let zi = z.index_axis(Axis(0), i);

                // First flow: linearised transport plus the raw jump.
                let mut y_drift = 0.0;
                for a in 0..d {
                    y_drift += a_x[[comp, a]] * yi[[k, a]];
                }
                for q in 0..kk {
                    y_drift += a_m[[comp, q]] * s1[q];
                }
                let mut y_next = yi[[k, comp]] + dt * y_drift;
                for c in 0..dims.dw {
                    let mut g = 0.0;
                    for a in 0..d {
                        g += b_x[[c, comp, a]] * yi[[k, a]];
                    }
                    for q in 0..kk {
                        g += b_m[[c, comp, q]] * s1[q];
                    }
                    y_next += g * base.dw[[i, k, c]];
                }

                // Second flow: transport of z, measure corrections, the
                // quadratic terms in y, and the jump of the derivatives.
                let mut z_drift = 0.0;
                for a in 0..d {
                    z_drift += a_x[[comp, a]] * zi[[k, a]];
                }
                for q in 0..kk {
                    z_drift += a_m[[comp, q]] * (s1z[q] + 0.5 * s2[q]);
                }
                for a in 0..d {
                    for b in 0..d {
                        z_drift += 0.5 * a_xx[[comp, a, b]] * yi[[k, a]] * yi[[k, b]];
                    }
                    for q in 0..kk {
                        z_drift += a_xm[[comp, a, q]] * yi[[k, a]] * s1[q];
                    }
                }
                for q in 0..kk {
                    for r in 0..kk {
                        z_drift += 0.5 * a_mm[[comp, q, r]] * s1[q] * s1[r];
                    }
                }
                let mut z_next = zi[[k, comp]] + dt * z_drift;
                for c in 0..dims.dw {
                    let mut g = 0.0;
                    for a in 0..d {
                        g += b_x[[c, comp, a]] * zi[[k, a]];
                    }
                    for q in 0..kk {
                        g += b_m[[c, comp, q]] * (s1z[q] + 0.5 * s2[q]);
                    }
                    for a in 0..d {
                        for b in 0..d {
                            g += 0.5 * b_xx[[c, comp, a, b]] * yi[[k, a]] * yi[[k, b]];
                        }
                        for q in 0..kk {
                            g += b_xm[[c, comp, a, q]] * yi[[k, a]] * s1[q];
                        }
                    }
                    for q in 0..kk {
                        for r in 0..kk {
                            g += 0.5 * b_mm[[c, comp, q, r]] * s1[q] * s1[r];
                        }
                    }
                    z_next += g * base.dw[[i, k, c]];
                }

                if let Some((da, db, da_x, da_m, db_x, db_m)) = &jump {
                    y_next += dt * da[comp];
                    let mut zj = 0.0;
                    for a in 0..d {
                        zj += da_x[[comp, a]] * yi[[k, a]];
                    }
                    for q in 0..kk {
                        zj += da_m[[comp, q]] * s1[q];
                    }
                    z_next += dt * zj;
                    for c in 0..dims.dw {
                        let mut g = db[[comp, c]];
                        // The first flow takes the raw diffusion jump; the
                        // derivative jumps ride with the second flow.
                        y_next += g * base.dw[[i, k, c]];
                        g = 0.0;
                        for a in 0..d {
                            g += db_x[[c, comp, a]] * yi[[k, a]];
                        }
                        for q in 0..kk {
                            g += db_m[[c, comp, q]] * s1[q];
                        }
                        z_next += g * base.dw[[i, k, c]];
                    }
                }

                if !y_next.is_finite() || !z_next.is_finite() {
                    return Err(Error::Divergence {
                        step: k,
                        detail: format!("variation flow of particle {i} left the finite range"),
                    });
                }
                y[[i, k + 1, comp]] = y_next;
                z[[i, k + 1, comp]] = z_next;
            }
        }
    }

    Ok(VariationFlows {
        y,
        z,
        window: (start, cells),
        beta: beta_emitted,
    })
}

/// Runs the base and the spiked ensembles on the supplied starting states
/// and increments, then integrates the flows. Refinement studies feed the
/// same Brownian path through this at several grid resolutions.
pub fn build_bundle_from(
    model: &dyn Coefficients,
    grid: &TimeGrid,
    law: &ControlLaw,
    spike: &SpikeVariation,
    x0s: &ndarray::Array2<f64>,
    dw: &Array3<f64>,
    seed: u64,
) -> Result<VariationBundle> {
    let base = simulate_with_increments(model, grid, law, x0s, dw, seed)?;
    let spiked_law = apply_spike(law, spike, grid)?;
    let spiked = simulate_with_increments(model, grid, &spiked_law, x0s, dw, seed)?;
    let flows = variation_flows(model, &base, spike)?;
    Ok(VariationBundle {
        base,
        spiked,
        flows,
        eps: spike.eps,
    })
}

/// Draws one noise set, runs the base and the spiked ensembles on it, and
/// integrates the flows.
#[allow(clippy::too_many_arguments)]
pub fn build_bundle(
    model: &dyn Coefficients,
    grid: &TimeGrid,
    law: &ControlLaw,
    spike: &SpikeVariation,
    x0: &[f64],
    x0_spread: f64,
    n: usize,
    seed: u64,
) -> Result<VariationBundle> {
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
    build_bundle_from(model, grid, law, spike, &x0s, &dw, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ControlSet, Dims, MomentMap, Tp1, Tp3};
    use crate::forward::{tilde_average, TildeMode};
    use ndarray::{arr1, arr2, Array1, Array2};

    fn spike(t0: f64, eps: f64, beta: &[f64]) -> SpikeVariation {
        SpikeVariation {
            t0,
            eps,
            beta: ControlLaw::constant(beta),
        }
    }

    #[test]
    fn identical_spike_gives_zero_flows_and_zero_difference() {
        let model = Tp3::default();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let b = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.2, 0.2, &[1.0]),
            &[0.8],
            0.3,
            40,
            21,
        )
        .unwrap();
        assert!(b.delta_x().iter().all(|v| *v == 0.0));
        assert!(b.flows.y.iter().all(|v| *v == 0.0));
        assert!(b.flows.z.iter().all(|v| *v == 0.0));
    }

    /// Drift is the control itself, nothing else moves: the first flow
    /// integrates the jump exactly and the second stays at zero.
    struct PureControlDrift {
        map: MomentMap,
        set: ControlSet,
    }

    impl Default for PureControlDrift {
        fn default() -> Self {
            Self {
                map: MomentMap::identity(1),
                set: ControlSet::Box {
                    lo: vec![-2.0],
                    hi: vec![2.0],
                    grid: 5,
                },
            }
        }
    }

    impl Coefficients for PureControlDrift {
        fn name(&self) -> &str {
            "pure-control-drift"
        }
        fn dims(&self) -> Dims {
            Dims { d: 1, dw: 1, du: 1 }
        }
        fn moment_map(&self) -> &MomentMap {
            &self.map
        }
        fn control_set(&self) -> &ControlSet {
            &self.set
        }
        fn drift(&self, _t: f64, _x: &[f64], _m: &[f64], u: &[f64]) -> Array1<f64> {
            arr1(&[u[0]])
        }
        fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
            Array2::zeros((1, 1))
        }
        fn running_cost(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> f64 {
            0.0
        }
        fn terminal_cost(&self, _x: &[f64], _m: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn pure_control_jump_integrates_to_window_length() {
        let model = PureControlDrift::default();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let b = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.2, 0.3, &[1.0]),
            &[0.0],
            0.0,
            2,
            7,
        )
        .unwrap();
        let y_t = b.flows.y[[0, 10, 0]];
        assert!((y_t - 0.3).abs() < 1e-14, "{y_t}");
        assert!(b.flows.z.iter().all(|v| *v == 0.0));
        // The dynamics are exactly linear in the control, so the first flow
        // already matches the full difference.
        let dx = b.delta_x();
        assert!((dx[[0, 10, 0]] - y_t).abs() < 1e-14);
    }

    #[test]
    fn linear_mean_field_growth_amplifies_an_early_spike() {
        // Drift a x + abar mean + b u with the jump placed at the start:
        // every particle shares the same first flow, which then grows at the
        // combined rate. Compare against the midpoint closed form.
        let model = Tp1::default();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let eps = 0.1;
        let b = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.0, eps, &[0.5]),
            &[1.0],
            0.0,
            2,
            3,
        )
        .unwrap();
        let y_t = b.flows.y[[0, 200, 0]];
        let rate = model.a + model.abar;
        let expected = 0.5 * model.b * eps * (rate * (1.0 - 0.5 * eps)).exp();
        assert!(
            (y_t - expected).abs() <= 0.02 * expected.abs(),
            "{y_t} vs {expected}"
        );
    }

    /// Quadratic drift x^2/2 plus control, no noise: the two flows follow
    /// scalar transport equations with a closed driving term.
    struct QuadraticDrift {
        map: MomentMap,
        set: ControlSet,
    }

    impl Default for QuadraticDrift {
        fn default() -> Self {
            Self {
                map: MomentMap::identity(1),
                set: ControlSet::Box {
                    lo: vec![-2.0],
                    hi: vec![2.0],
                    grid: 5,
                },
            }
        }
    }

    impl Coefficients for QuadraticDrift {
        fn name(&self) -> &str {
            "quadratic-drift"
        }
        fn dims(&self) -> Dims {
            Dims { d: 1, dw: 1, du: 1 }
        }
        fn moment_map(&self) -> &MomentMap {
            &self.map
        }
        fn control_set(&self) -> &ControlSet {
            &self.set
        }
        fn drift(&self, _t: f64, x: &[f64], _m: &[f64], u: &[f64]) -> Array1<f64> {
            arr1(&[0.5 * x[0] * x[0] + u[0]])
        }
        fn drift_x(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
            arr2(&[[x[0]]])
        }
        fn drift_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> ndarray::Array3<f64> {
            ndarray::Array3::from_elem((1, 1, 1), 1.0)
        }
        fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
            Array2::zeros((1, 1))
        }
        fn running_cost(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> f64 {
            0.0
        }
        fn terminal_cost(&self, _x: &[f64], _m: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn quadratic_drift_flows_match_the_transport_equations() {
        // x' = x^2/2 from 1, y' = x y + 1 on the window, z' = x z + y^2/2.
        let model = QuadraticDrift::default();
        let steps = 6400;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let eps = 0.25;
        let b = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.0, eps, &[1.0]),
            &[1.0],
            0.0,
            2,
            5,
        )
        .unwrap();
        let rhs = |t: f64, v: &[f64]| {
            let (x, y, z) = (v[0], v[1], v[2]);
            vec![
                0.5 * x * x,
                x * y + if t < eps { 1.0 } else { 0.0 },
                x * z + 0.5 * y * y,
            ]
        };
        let v = crate::util::ode::rk4(rhs, 0.0, 1.0, &[1.0, 0.0, 0.0], 12800);
        let y_t = b.flows.y[[0, steps, 0]];
        let z_t = b.flows.z[[0, steps, 0]];
        assert!((y_t - v[1]).abs() <= 1e-3 * v[1].abs(), "{y_t} vs {}", v[1]);
        assert!((z_t - v[2]).abs() <= 1e-3 * v[2].abs(), "{z_t} vs {}", v[2]);
    }

    #[test]
    fn factorised_copy_averages_agree_with_the_dense_reference() {
        // Re-integrate the first flow with the measure term computed by the
        // dense double-copy average and compare path by path.
        let model = Tp3::default();
        let n = 16;
        let steps = 20;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let sp = spike(0.25, 0.25, &[-1.0]);
        let b = build_bundle(&model, &grid, &law, &sp, &[0.7], 0.4, n, 13).unwrap();
        let map = model.moment_map();
        let dt = grid.dt();

        let mut y_ref = Array3::<f64>::zeros((n, steps + 1, 1));
        for k in 0..steps {
            let t = grid.knot(k);
            let m: Vec<f64> = b.base.moments_at(k).to_vec();
            let meas = tilde_average(TildeMode::CoefficientAtCopy, n, 2, |i, j, out| {
                let xi = b.base.state(i, k);
                let ui = b.base.control(i, k);
                let a_m = model.drift_m(t, xi, &m, ui);
                let b_m = model.diffusion_m(t, xi, &m, ui);
                let dpsi = map.dpsi(b.base.state(j, k));
                for q in 0..map.k() {
                    let lever = dpsi[[q, 0]] * y_ref[[j, k, 0]];
                    out[0] += a_m[[0, q]] * lever;
                    out[1] += b_m[[0, 0, q]] * lever;
                }
            });
            let in_window = k >= b.flows.window.0 && k < b.flows.window.0 + b.flows.window.1;
            for i in 0..n {
                let x = b.base.state(i, k);
                let u = b.base.control(i, k);
                let a_x = model.drift_x(t, x, &m, u);
                let b_x = model.diffusion_x(t, x, &m, u);
                let mut drift = a_x[[0, 0]] * y_ref[[i, k, 0]] + meas[[i, 0]];
                let mut diff = b_x[[0, 0, 0]] * y_ref[[i, k, 0]] + meas[[i, 1]];
                if in_window {
                    let beta = sp.beta.value(i, k, t, x, &m);
                    drift += model.drift(t, x, &m, &beta)[0] - model.drift(t, x, &m, u)[0];
                    diff +=
                        model.diffusion(t, x, &m, &beta)[[0, 0]] - model.diffusion(t, x, &m, u)[[0, 0]];
                }
                y_ref[[i, k + 1, 0]] = y_ref[[i, k, 0]] + dt * drift + diff * b.base.dw[[i, k, 0]];
            }
        }
        for i in 0..n {
            for k in 0..=steps {
                assert!(
                    (y_ref[[i, k, 0]] - b.flows.y[[i, k, 0]]).abs() <= 1e-12,
                    "particle {i} step {k}"
                );
            }
        }
    }

    /// Quadratic state and measure couplings with an additive control and a
    /// state-plus-mean diffusion: every term of the second flow is active,
    /// yet the coefficients are control-free so the jump height scales out.
    struct MixedToy {
        map: MomentMap,
        set: ControlSet,
    }

    impl Default for MixedToy {
        fn default() -> Self {
            Self {
                map: MomentMap::powers_1d(2),
                set: ControlSet::Box {
                    lo: vec![-2.0],
                    hi: vec![2.0],
                    grid: 5,
                },
            }
        }
    }

    impl Coefficients for MixedToy {
        fn name(&self) -> &str {
            "mixed-toy"
        }
        fn dims(&self) -> Dims {
            Dims { d: 1, dw: 1, du: 1 }
        }
        fn moment_map(&self) -> &MomentMap {
            &self.map
        }
        fn control_set(&self) -> &ControlSet {
            &self.set
        }
        fn drift(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array1<f64> {
            arr1(&[0.5 * x[0] * x[0] + 0.5 * m[1] * x[0] + 0.5 * m[0] * m[0] + u[0]])
        }
        fn drift_x(&self, _t: f64, x: &[f64], m: &[f64], _u: &[f64]) -> Array2<f64> {
            arr2(&[[x[0] + 0.5 * m[1]]])
        }
        fn drift_m(&self, _t: f64, x: &[f64], m: &[f64], _u: &[f64]) -> Array2<f64> {
            arr2(&[[m[0], 0.5 * x[0]]])
        }
        fn drift_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> ndarray::Array3<f64> {
            ndarray::Array3::from_elem((1, 1, 1), 1.0)
        }
        fn drift_xm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> ndarray::Array3<f64> {
            let mut out = ndarray::Array3::zeros((1, 1, 2));
            out[[0, 0, 1]] = 0.5;
            out
        }
        fn drift_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> ndarray::Array3<f64> {
            let mut out = ndarray::Array3::zeros((1, 2, 2));
            out[[0, 0, 0]] = 1.0;
            out
        }
        fn diffusion(&self, _t: f64, x: &[f64], m: &[f64], _u: &[f64]) -> Array2<f64> {
            arr2(&[[0.1 * x[0] + 0.05 * m[0]]])
        }
        fn diffusion_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> ndarray::Array3<f64> {
            ndarray::Array3::from_elem((1, 1, 1), 0.1)
        }
        fn diffusion_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> ndarray::Array3<f64> {
            let mut out = ndarray::Array3::zeros((1, 1, 2));
            out[[0, 0, 0]] = 0.05;
            out
        }
        fn running_cost(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> f64 {
            0.0
        }
        fn terminal_cost(&self, _x: &[f64], _m: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn flows_scale_linearly_and_quadratically_in_the_jump_height() {
        // The control enters additively, so doubling the jump doubles the
        // first flow and exactly quadruples the second.
        let model = MixedToy::default();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let b1 = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.25, 0.25, &[0.5]),
            &[0.6],
            0.3,
            24,
            99,
        )
        .unwrap();
        let b2 = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.25, 0.25, &[1.0]),
            &[0.6],
            0.3,
            24,
            99,
        )
        .unwrap();
        let scale_y = |v: f64| 2.0 * v;
        let scale_z = |v: f64| 4.0 * v;
        let mut max_y: f64 = 0.0;
        let mut max_z: f64 = 0.0;
        for (a, b) in b1.flows.y.iter().zip(b2.flows.y.iter()) {
            max_y = max_y.max((scale_y(*a) - *b).abs());
        }
        for (a, b) in b1.flows.z.iter().zip(b2.flows.z.iter()) {
            max_z = max_z.max((scale_z(*a) - *b).abs());
        }
        assert!(max_y <= 1e-12, "{max_y}");
        assert!(max_z <= 1e-12, "{max_z}");
    }

    #[test]
    fn window_must_fit_and_jump_must_be_admissible() {
        let model = Tp3::default();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let law = ControlLaw::constant(&[1.0]);
        let err = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.9, 0.2, &[-1.0]),
            &[0.5],
            0.0,
            4,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{err:?}");
        let err = build_bundle(
            &model,
            &grid,
            &law,
            &spike(0.2, 0.2, &[0.3]),
            &[0.5],
            0.0,
            4,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Control(_)), "{err:?}");
    }
}
