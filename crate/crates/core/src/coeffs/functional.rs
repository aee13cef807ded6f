//! Scalar functionals of a measure through its moment vector, with exact
//! measure derivatives and the finite-difference / expansion checks used to
//! validate them.

use ndarray::{Array1, Array2, ArrayView2};

use super::momentmap::MomentMap;
use crate::{Error, Result};

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type HessFn = dyn Fn(&[f64]) -> Array2<f64> + Send + Sync;

/// phi(mu) = F(m) with m = mean of psi over the ensemble. F comes with its
/// gradient and Hessian so every measure derivative below is closed form.
pub struct MomentFunctional {
    map: MomentMap,
    f: Box<ScalarFn>,
    grad: Box<GradFn>,
    hess: Box<HessFn>,
}

/// The two leading orders of the measure expansion of phi between two
/// ensembles, split by which derivative produced each term, plus the
/// remainder that the second-order expansion leaves behind.
#[derive(Debug, Clone, Copy)]
pub struct TaylorTerms {
    /// mean_i < d_mu phi(m0)(X_i), eta_i >
    pub first: f64,
    /// (1/2) pair-mean < eta_i, d2_mu phi(m0)(X_i, X_j) eta_j >
    pub second_mixed: f64,
    /// (1/2) mean_i < eta_i, d_y d_mu phi(m0)(X_i) eta_i >
    pub second_y: f64,
    /// phi(new) - phi(base) - first - second_mixed - second_y
    pub remainder: f64,
}

impl MomentFunctional {
    pub fn new(
        map: MomentMap,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hess: impl Fn(&[f64]) -> Array2<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            map,
            f: Box::new(f),
            grad: Box::new(grad),
            hess: Box::new(hess),
        }
    }

    pub fn map(&self) -> &MomentMap {
        &self.map
    }

    /// Empirical moment vector of an ensemble of states, one row per sample.
    pub fn moments(&self, states: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let (n, d) = states.dim();
        if n == 0 || d != self.map.d() {
            return Err(Error::Dimension(format!(
                "moment input must be non-empty with d = {}, got {} x {}",
                self.map.d(),
                n,
                d
            )));
        }
        let mut m = vec![0.0; self.map.k()];
        for i in 0..n {
            let row = states.row(i);
            let psi = self.map.psi(row.as_slice().expect("row-major states"));
            for (mk, pk) in m.iter_mut().zip(&psi) {
                *mk += pk;
            }
        }
        for mk in &mut m {
            *mk /= n as f64;
        }
        Ok(m)
    }

    pub fn value(&self, states: ArrayView2<'_, f64>) -> Result<f64> {
        Ok((self.f)(&self.moments(states)?))
    }

    /// The Lions derivative of phi at the empirical measure of `states`,
    /// evaluated at the point y: grad F(m) composed with dpsi(y).
    pub fn lions_derivative(&self, states: ArrayView2<'_, f64>, y: &[f64]) -> Result<Array1<f64>> {
        let m = self.moments(states)?;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite moment vector".into()));
        }
        if y.len() != self.map.d() {
            return Err(Error::Dimension(format!(
                "evaluation point has dimension {}, expected {}",
                y.len(),
                self.map.d()
            )));
        }
        let g = (self.grad)(&m);
        let dpsi = self.map.dpsi(y);
        let mut out = Array1::zeros(self.map.d());
        for a in 0..self.map.d() {
            out[a] = (0..self.map.k()).map(|k| g[k] * dpsi[[k, a]]).sum();
        }
        Ok(out)
    }

    /// Compares the average pairing of the Lions derivative with a direction
    /// against a central difference of the lifted map along that direction.
    /// Returns |analytic - fd| / max(1, |fd|).
    pub fn check_lions_fd(
        &self,
        states: ArrayView2<'_, f64>,
        direction: ArrayView2<'_, f64>,
        h: f64,
    ) -> Result<f64> {
        if h <= 0.0 {
            return Err(Error::Argument("finite-difference step must be positive".into()));
        }
        if states.dim() != direction.dim() {
            return Err(Error::Dimension(
                "states and direction must have identical shapes".into(),
            ));
        }
        let n = states.nrows();
        let mut analytic = 0.0;
        for i in 0..n {
            let grad = self.lions_derivative(states, states.row(i).as_slice().unwrap())?;
            for a in 0..self.map.d() {
                analytic += grad[a] * direction[[i, a]];
            }
        }
        analytic /= n as f64;

        let plus = &states + &(h * &direction.to_owned());
        let minus = &states - &(h * &direction.to_owned());
        let fd = (self.value(plus.view())? - self.value(minus.view())?) / (2.0 * h);
        Ok((analytic - fd).abs() / fd.abs().max(1.0))
    }

    /// Second-order expansion of phi between the empirical measures of two
    /// coupled ensembles, with the double-copy term computed as the full
    /// N x N pair average.
    pub fn taylor_expand_measure(
        &self,
        base: ArrayView2<'_, f64>,
        new: ArrayView2<'_, f64>,
    ) -> Result<TaylorTerms> {
        if base.dim() != new.dim() {
            return Err(Error::Dimension(
                "base and new ensembles must have identical shapes".into(),
            ));
        }
        let n = base.nrows();
        let d = self.map.d();
        let k = self.map.k();
        let m0 = self.moments(base)?;
        let g = (self.grad)(&m0);
        let hess = (self.hess)(&m0);

        // Per-sample pairings of eta with dpsi and d2psi at the base points.
        // dpair[[i, k]] = < dpsi_k(X_i), eta_i >; ypair[i] sums the Hessian
        // of psi against eta twice.
        let mut dpair = Array2::<f64>::zeros((n, k));
        let mut second_y = 0.0;
        for i in 0..n {
            let xi = base.row(i);
            let xi = xi.as_slice().unwrap();
            let dpsi = self.map.dpsi(xi);
            let d2psi = self.map.d2psi(xi);
            for kk in 0..k {
                let mut acc = 0.0;
                for a in 0..d {
                    acc += dpsi[[kk, a]] * (new[[i, a]] - base[[i, a]]);
                }
                dpair[[i, kk]] = acc;
                let mut quad = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        quad += (new[[i, a]] - base[[i, a]])
                            * d2psi[[kk, a, b]]
                            * (new[[i, b]] - base[[i, b]]);
                    }
                }
                second_y += 0.5 * g[kk] * quad / n as f64;
            }
        }

        let mut first = 0.0;
        for i in 0..n {
            for kk in 0..k {
                first += g[kk] * dpair[[i, kk]];
            }
        }
        first /= n as f64;

        let mut second_mixed = 0.0;
        for i in 0..n {
            for j in 0..n {
                for kk in 0..k {
                    for ll in 0..k {
                        second_mixed += dpair[[i, kk]] * hess[[kk, ll]] * dpair[[j, ll]];
                    }
                }
            }
        }
        second_mixed *= 0.5 / (n as f64 * n as f64);

        let delta = self.value(new)? - self.value(base)?;
        Ok(TaylorTerms {
            first,
            second_mixed,
            second_y,
            remainder: delta - first - second_mixed - second_y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    fn mean_squared() -> MomentFunctional {
        // phi(mu) = (mean of x)^2
        MomentFunctional::new(
            MomentMap::identity(1),
            |m| m[0] * m[0],
            |m| vec![2.0 * m[0]],
            |_| arr2(&[[2.0]]),
        )
    }

    fn mean_cubed() -> MomentFunctional {
        MomentFunctional::new(
            MomentMap::identity(1),
            |m| m[0].powi(3),
            |m| vec![3.0 * m[0] * m[0]],
            |m| arr2(&[[6.0 * m[0]]]),
        )
    }

    fn sin_of_second_moment() -> MomentFunctional {
        MomentFunctional::new(
            MomentMap::powers_1d(2),
            |m| m[1].sin(),
            |m| vec![0.0, m[1].cos()],
            |m| arr2(&[[0.0, 0.0], [0.0, -m[1].sin()]]),
        )
    }

    fn exp_of_mean() -> MomentFunctional {
        MomentFunctional::new(
            MomentMap::identity(1),
            |m| m[0].exp(),
            |m| vec![m[0].exp()],
            |m| arr2(&[[m[0].exp()]]),
        )
    }

    #[test]
    fn squared_mean_derivative_is_twice_the_mean() {
        let phi = mean_squared();
        let states = arr2(&[[1.0], [2.0], [3.0]]);
        let g = phi.lions_derivative(states.view(), &[0.33]).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn identity_functional_derivative_is_one() {
        let phi = MomentFunctional::new(
            MomentMap::identity(1),
            |m| m[0],
            |_| vec![1.0],
            |_| arr2(&[[0.0]]),
        );
        let states = arr2(&[[-0.4], [1.7], [0.2], [5.0]]);
        let g = phi.lions_derivative(states.view(), &[2.0]).unwrap();
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn sine_of_second_moment_matches_chain_rule() {
        let phi = sin_of_second_moment();
        let states = arr2(&[[0.5], [1.0]]);
        // m2 = (0.25 + 1.0) / 2 = 0.625, derivative at y = 1 is cos(m2) * 2y.
        let g = phi.lions_derivative(states.view(), &[1.0]).unwrap();
        let expect = 0.625_f64.cos() * 2.0;
        assert!((g[0] - expect).abs() < 1e-14);
        assert!((g[0] - 1.6221).abs() < 5e-4);
    }

    #[test]
    fn empty_ensemble_is_rejected() {
        let phi = mean_squared();
        let states = Array2::<f64>::zeros((0, 1));
        assert!(matches!(
            phi.lions_derivative(states.view(), &[0.0]),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let phi = mean_squared();
        let states = arr2(&[[f64::NAN], [1.0]]);
        assert!(matches!(
            phi.lions_derivative(states.view(), &[0.0]),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn lifted_difference_check_linear_functional_is_exact() {
        let phi = MomentFunctional::new(
            MomentMap::identity(1),
            |m| 3.0 * m[0] + 1.0,
            |_| vec![3.0],
            |_| arr2(&[[0.0]]),
        );
        let states = arr2(&[[0.3], [-1.2], [0.9]]);
        let dir = arr2(&[[1.0], [0.5], [-2.0]]);
        let err = phi.check_lions_fd(states.view(), dir.view(), 1e-3).unwrap();
        assert!(err <= 1e-12, "error {err}");
    }

    #[test]
    fn lifted_difference_check_zero_direction() {
        let phi = mean_cubed();
        let states = arr2(&[[0.3], [-1.2]]);
        let dir = Array2::zeros((2, 1));
        let err = phi.check_lions_fd(states.view(), dir.view(), 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn lifted_difference_check_cubic() {
        let phi = mean_cubed();
        let states = arr2(&[[1.0], [1.0]]);
        let dir = arr2(&[[1.0], [1.0]]);
        let err = phi.check_lions_fd(states.view(), dir.view(), 1e-4).unwrap();
        assert!(err <= 1e-7, "error {err}");
    }

    #[test]
    fn step_must_be_positive() {
        let phi = mean_squared();
        let states = arr2(&[[1.0]]);
        let dir = arr2(&[[1.0]]);
        assert!(matches!(
            phi.check_lions_fd(states.view(), dir.view(), 0.0),
            Err(crate::Error::Argument(_))
        ));
    }

    #[test]
    fn expansion_with_no_increment_is_zero() {
        let phi = exp_of_mean();
        let states = arr2(&[[0.2], [-0.7], [1.4]]);
        let t = phi
            .taylor_expand_measure(states.view(), states.view())
            .unwrap();
        assert_eq!(t.first, 0.0);
        assert_eq!(t.second_mixed, 0.0);
        assert_eq!(t.second_y, 0.0);
        assert_eq!(t.remainder, 0.0);
    }

    #[test]
    fn quadratic_functional_expands_exactly() {
        let phi = mean_squared();
        let base = arr2(&[[0.4], [-0.9], [2.2], [0.1]]);
        let shift = arr2(&[[0.3], [0.3], [0.3], [0.3]]);
        let new = &base + &shift;
        let t = phi.taylor_expand_measure(base.view(), new.view()).unwrap();
        assert!(t.remainder.abs() <= 1e-12, "remainder {}", t.remainder);
    }

    #[test]
    fn exponential_remainder_matches_scalar_oracle() {
        let phi = exp_of_mean();
        // Base mean zero, constant increment 0.1: the expansion leaves
        // exp(0.1) - 1 - 0.1 - 0.005.
        let base = arr2(&[[0.5], [-0.5], [0.25], [-0.25]]);
        let new = &base + 0.1;
        let t = phi.taylor_expand_measure(base.view(), new.view()).unwrap();
        let expect = 0.1_f64.exp() - 1.0 - 0.1 - 0.005;
        assert!((t.remainder - expect).abs() < 1e-12);
        assert!((t.remainder - 1.709e-4).abs() < 1e-6);
    }

    #[test]
    fn mismatched_ensembles_are_rejected() {
        let phi = exp_of_mean();
        let base = arr2(&[[0.0], [1.0]]);
        let new = arr2(&[[0.0]]);
        assert!(matches!(
            phi.taylor_expand_measure(base.view(), new.view()),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn pair_average_factorizes_for_separable_kernels() {
        // mean over (i, j) of a(x_i) b(x_j) equals mean(a) * mean(b).
        let xs = [0.3_f64, -1.1, 0.7, 2.4, -0.2];
        let a = |x: f64| x * x;
        let b = |x: f64| (x - 0.5).cos();
        let n = xs.len() as f64;
        let mut pair = 0.0;
        for &xi in &xs {
            for &xj in &xs {
                pair += a(xi) * b(xj);
            }
        }
        pair /= n * n;
        let prod = xs.iter().map(|&x| a(x)).sum::<f64>() / n
            * (xs.iter().map(|&x| b(x)).sum::<f64>() / n);
        assert!((pair - prod).abs() <= 1e-12 * prod.abs().max(1.0));
    }

    #[test]
    fn lions_derivative_is_moment_lipschitz() {
        // For phi = sin(second moment), the derivative at y differs between
        // two ensembles by at most |m - m'| * |2y| because |cos| has unit
        // Lipschitz constant.
        let phi = sin_of_second_moment();
        let s1 = arr2(&[[0.5], [1.0], [-0.7]]);
        let s2 = arr2(&[[1.3], [0.1], [0.4]]);
        let m1 = phi.moments(s1.view()).unwrap();
        let m2 = phi.moments(s2.view()).unwrap();
        let dm = ((m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2)).sqrt();
        for y in [-1.5, -0.2, 0.9, 2.0] {
            let g1 = phi.lions_derivative(s1.view(), &[y]).unwrap();
            let g2 = phi.lions_derivative(s2.view(), &[y]).unwrap();
            assert!((g1[0] - g2[0]).abs() <= dm * 2.0 * y.abs() + 1e-12);
        }
    }
}
