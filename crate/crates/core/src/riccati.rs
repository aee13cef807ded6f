//! Closed-form machinery for the linear-quadratic mean-field problem.
//!
//! The convex problem with linear state and mean coupling admits a feedback
//! optimum through two coupled scalar Riccati flows, and its adjoint pair is
//! affine with coefficients solving two more linear backward equations. This
//! module integrates all four to high accuracy and exposes them as oracles:
//! the optimal feedback law, interpolated coefficient tables, and the exact
//! optimal cost under a uniformly spread starting point.

use std::sync::Arc;

use crate::coeffs::Tp1;
use crate::forward::ControlLaw;
use crate::util::ode::rk4;

/// Coefficient tables on a fine uniform grid over [0, horizon].
#[derive(Debug, Clone)]
pub struct Tp1Riccati {
    pub horizon: f64,
    /// State feedback weight in the costate: p = gamma x + lambda mean.
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    /// State weight of the second adjoint and the pair weight of the third.
    pub big_p: Vec<f64>,
    pub big_pp: Vec<f64>,
    b_over_r: f64,
}

impl Tp1Riccati {
    /// Integrates the four backward flows with RK4 on `fine` uniform cells.
    pub fn solve(model: &Tp1, horizon: f64, fine: usize) -> Self {
        let (a, abar, b, r) = (model.a, model.abar, model.b, model.r);
        let (c, cbar, s, sbar) = (model.c, model.cbar, model.s, model.sbar);
        let n = fine + 1;
        let mut gamma = vec![0.0; n];
        let mut lambda = vec![0.0; n];
        let mut big_p = vec![0.0; n];
        let mut big_pp = vec![0.0; n];
        gamma[fine] = s;
        lambda[fine] = sbar;
        big_p[fine] = s;
        big_pp[fine] = sbar;

        let rhs = |_t: f64, v: &[f64]| {
            let (g, l, p, pp) = (v[0], v[1], v[2], v[3]);
            vec![
                -2.0 * a * g + (b * b / r) * g * g - c,
                -2.0 * abar * g - 2.0 * (a + abar) * l - cbar + (b * b / r) * (2.0 * g * l + l * l),
                -(2.0 * a * p + c),
                -(2.0 * (a + abar) * pp + 2.0 * abar * p + cbar),
            ]
        };
        let dt = horizon / fine as f64;
        let mut state = vec![s, sbar, s, sbar];
        for k in (0..fine).rev() {
            let t1 = dt * (k + 1) as f64;
            let t0 = dt * k as f64;
            state = rk4(rhs, t1, t0, &state, 8);
            gamma[k] = state[0];
            lambda[k] = state[1];
            big_p[k] = state[2];
            big_pp[k] = state[3];
        }

        Self {
            horizon,
            gamma,
            lambda,
            big_p,
            big_pp,
            b_over_r: b / r,
        }
    }

    fn interp(table: &[f64], horizon: f64, t: f64) -> f64 {
        let fine = table.len() - 1;
        let pos = (t / horizon * fine as f64).clamp(0.0, fine as f64);
        let lo = (pos.floor() as usize).min(fine - 1);
        let w = pos - lo as f64;
        table[lo] * (1.0 - w) + table[lo + 1] * w
    }

    pub fn gamma_at(&self, t: f64) -> f64 {
        Self::interp(&self.gamma, self.horizon, t)
    }

    pub fn lambda_at(&self, t: f64) -> f64 {
        Self::interp(&self.lambda, self.horizon, t)
    }

    pub fn big_p_at(&self, t: f64) -> f64 {
        Self::interp(&self.big_p, self.horizon, t)
    }

    pub fn big_pp_at(&self, t: f64) -> f64 {
        Self::interp(&self.big_pp, self.horizon, t)
    }

    /// The costate of particle state x under population mean m.
    pub fn costate(&self, t: f64, x: f64, m: f64) -> f64 {
        self.gamma_at(t) * x + self.lambda_at(t) * m
    }

    /// Optimal feedback u = -(b/r)(gamma x + lambda mean).
    pub fn feedback_law(&self) -> ControlLaw {
        let tables = Arc::new(self.clone());
        ControlLaw::feedback(move |t, x: &[f64], m: &[f64]| {
            vec![-tables.b_over_r * tables.costate(t, x[0], m[0])]
        })
    }

    /// Exact limiting cost of the feedback optimum started from x0 spread
    /// uniformly with the given half-width: integrates the closed-loop mean
    /// and second-moment flow together with the running cost.
    pub fn optimal_value(&self, model: &Tp1, x0: f64, spread: f64, fine: usize) -> f64 {
        let (a, abar, b, r) = (model.a, model.abar, model.b, model.r);
        let (c, cbar, s, sbar, sigma) = (model.c, model.cbar, model.s, model.sbar, model.sigma);
        let k = b * b / r;
        let rhs = |t: f64, v: &[f64]| {
            let (m, snd, _) = (v[0], v[1], v[2]);
            let g = self.gamma_at(t);
            let l = self.lambda_at(t);
            let m2 = m * m;
            let eu2 = (k / r) * (g * g * snd + (2.0 * g * l + l * l) * m2);
            vec![
                (a + abar - k * (g + l)) * m,
                2.0 * (a - k * g) * snd + 2.0 * (abar - k * l) * m2 + sigma * sigma,
                0.5 * r * eu2 + 0.5 * c * snd + 0.5 * cbar * m2,
            ]
        };
        let start = vec![x0, x0 * x0 + spread * spread / 3.0, 0.0];
        let end = rk4(rhs, 0.0, self.horizon, &start, fine);
        end[2] + 0.5 * s * end[1] + 0.5 * sbar * end[0] * end[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_values_seed_the_tables() {
        let model = Tp1::default();
        let ric = Tp1Riccati::solve(&model, 1.0, 400);
        assert_eq!(*ric.gamma.last().unwrap(), model.s);
        assert_eq!(*ric.lambda.last().unwrap(), model.sbar);
        assert_eq!(*ric.big_p.last().unwrap(), model.s);
        assert_eq!(*ric.big_pp.last().unwrap(), model.sbar);
    }

    #[test]
    fn without_mean_coupling_the_mean_tables_vanish() {
        let model = Tp1::without_measure_terms();
        let ric = Tp1Riccati::solve(&model, 1.0, 400);
        assert!(ric.lambda.iter().all(|v| v.abs() < 1e-12));
        assert!(ric.big_pp.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn uncontrolled_tables_collapse_to_linear_closed_forms() {
        // With b = 0 the state and pair flows coincide with the adjoint
        // weights, and the state weight has an explicit exponential form.
        let mut model = Tp1::default();
        model.b = 0.0;
        let ric = Tp1Riccati::solve(&model, 1.0, 800);
        let (a, c, s) = (model.a, model.c, model.s);
        for (k, g) in ric.gamma.iter().enumerate() {
            let t = k as f64 / 800.0;
            let exact = (s + c / (2.0 * a)) * (2.0 * a * (1.0 - t)).exp() - c / (2.0 * a);
            assert!((g - exact).abs() < 1e-10, "knot {k}: {g} vs {exact}");
            assert!((g - ric.big_p[k]).abs() < 1e-12);
            assert!((ric.lambda[k] - ric.big_pp[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn riccati_flow_satisfies_its_own_equation() {
        // Central finite differences of the table against the right side.
        let model = Tp1::default();
        let fine = 4000;
        let ric = Tp1Riccati::solve(&model, 1.0, fine);
        let dt = 1.0 / fine as f64;
        let (a, b, r, c) = (model.a, model.b, model.r, model.c);
        for k in (200..fine - 200).step_by(271) {
            let deriv = (ric.gamma[k + 1] - ric.gamma[k - 1]) / (2.0 * dt);
            let g = ric.gamma[k];
            let rhs = -2.0 * a * g + (b * b / r) * g * g - c;
            assert!((deriv - rhs).abs() < 1e-6, "knot {k}");
        }
    }

    #[test]
    fn classical_value_identity_holds_without_mean_coupling() {
        // With no mean terms and a point start the optimal cost reduces to
        // the standard expression through the state weight alone:
        // half gamma(0) x0^2 plus half sigma^2 integral of gamma.
        let model = Tp1::without_measure_terms();
        let fine = 2000;
        let ric = Tp1Riccati::solve(&model, 1.0, fine);
        let x0 = 0.8;
        let value = ric.optimal_value(&model, x0, 0.0, 4000);
        let dt = 1.0 / fine as f64;
        let mut integral = 0.0;
        for k in 0..fine {
            integral += 0.5 * dt * (ric.gamma[k] + ric.gamma[k + 1]);
        }
        let classical = 0.5 * ric.gamma[0] * x0 * x0 + 0.5 * model.sigma * model.sigma * integral;
        assert!(
            (value - classical).abs() < 1e-6,
            "{value} vs {classical}"
        );
    }

    #[test]
    fn feedback_law_reads_state_and_mean() {
        let model = Tp1::default();
        let ric = Tp1Riccati::solve(&model, 1.0, 400);
        let law = ric.feedback_law();
        let u = law.value(0, 0, 0.3, &[1.2], &[0.7]);
        let expect = -(model.b / model.r) * (ric.gamma_at(0.3) * 1.2 + ric.lambda_at(0.3) * 0.7);
        assert!((u[0] - expect).abs() < 1e-14);
    }
}
