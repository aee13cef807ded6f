//! The control objective evaluated on a simulated ensemble.

use crate::coeffs::Coefficients;
use crate::forward::ParticleEnsemble;
use crate::{Error, Result};

/// Pathwise objective of every particle: trapezoidal running cost along the
/// path (the control is constant on each cell, so it enters both endpoint
/// evaluations unchanged) plus the terminal cost at the final empirical
/// moments.
pub(crate) fn pathwise_cost(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
) -> Result<Vec<f64>> {
    let steps = ens.grid.steps();
    let dt = ens.grid.dt();
    let n = ens.n();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..steps {
            let u = ens.control(i, k);
            let f0 = model.running_cost(ens.grid.knot(k), ens.state(i, k), ens.moments_at(k), u);
            let f1 = model.running_cost(
                ens.grid.knot(k + 1),
                ens.state(i, k + 1),
                ens.moments_at(k + 1),
                u,
            );
            acc += 0.5 * dt * (f0 + f1);
        }
        acc += model.terminal_cost(ens.state(i, steps), ens.moments_at(steps));
        if !acc.is_finite() {
            return Err(Error::Numeric(format!(
                "objective of particle {i} is not finite"
            )));
        }
        out.push(acc);
    }
    Ok(out)
}

/// Ensemble average of the pathwise objective.
pub fn cost_functional(model: &dyn Coefficients, ens: &ParticleEnsemble) -> Result<f64> {
    let costs = pathwise_cost(model, ens)?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ControlSet, Dims, MomentMap, Tp1};
    use crate::forward::{simulate_mv_sde, ControlLaw, TimeGrid};
    use crate::riccati::Tp1Riccati;
    use ndarray::{arr2, Array1, Array2};

    struct FlatCost {
        running: f64,
        quadratic_terminal: bool,
        map: MomentMap,
        set: ControlSet,
    }

    impl FlatCost {
        fn new(running: f64, quadratic_terminal: bool) -> Self {
            Self {
                running,
                quadratic_terminal,
                map: MomentMap::identity(1),
                set: ControlSet::Box {
                    lo: vec![-1.0],
                    hi: vec![1.0],
                    grid: 3,
                },
            }
        }
    }

    impl Coefficients for FlatCost {
        fn name(&self) -> &str {
            "flat-cost"
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
        fn drift(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
            Array1::zeros(1)
        }
        fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
            arr2(&[[0.0]])
        }
        fn running_cost(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> f64 {
            self.running
        }
        fn terminal_cost(&self, x: &[f64], _m: &[f64]) -> f64 {
            if self.quadratic_terminal {
                0.5 * x[0] * x[0]
            } else {
                0.0
            }
        }
    }

    #[test]
    fn constant_running_cost_integrates_to_the_horizon() {
        let model = FlatCost::new(1.0, false);
        let grid = TimeGrid::new(1.0, 7).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let ens = simulate_mv_sde(&model, &grid, &law, &[0.3], 0.2, 5, 11).unwrap();
        assert!((cost_functional(&model, &ens).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_only_cost_reads_the_final_state() {
        // Frozen dynamics: every particle stays at 2, so g = x^2 / 2 = 2.
        let model = FlatCost::new(0.0, true);
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let law = ControlLaw::constant(&[0.0]);
        let ens = simulate_mv_sde(&model, &grid, &law, &[2.0], 0.0, 4, 11).unwrap();
        assert!((cost_functional(&model, &ens).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn convex_problem_value_matches_the_backward_table() {
        let model = Tp1::default();
        let ric = Tp1Riccati::solve(&model, 1.0, 4000);
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let law = ric.feedback_law();
        let x0 = 1.0;
        let spread = 0.5;
        let ens = simulate_mv_sde(&model, &grid, &law, &[x0], spread, 4000, 2024).unwrap();
        let simulated = cost_functional(&model, &ens).unwrap();
        let exact = ric.optimal_value(&model, x0, spread, 4000);
        let gap = (simulated - exact).abs() / exact.abs();
        assert!(
            gap < 0.02,
            "simulated {simulated} vs closed loop {exact}, rel {gap:.3e}"
        );
    }
}
