//! The control Hamiltonian H = <A, p> + <B, q> + f and its second-derivative
//! blocks in state and moment coordinates.
//!
//! The sign convention pairs the running cost with a plus: under it an
//! optimal control minimizes H pointwise, the adjoint terminal conditions
//! carry the plain gradients of g, and the spike expansion of the cost
//! balances term by term. All backward drivers in this crate assemble their
//! Hamiltonian blocks through these helpers.

use ndarray::{Array1, Array2, ArrayView2};

use super::model::Coefficients;
use super::momentmap::MomentMap;
use crate::{Error, Result};

/// Value and derivative blocks of H at one evaluation point. Measure
/// derivatives are stored in moment coordinates; the `*_at` helpers turn
/// them into the pointwise kernels that the averaging primitives consume.
#[derive(Debug, Clone)]
pub struct HamiltonianEval {
    pub value: f64,
    pub h_x: Array1<f64>,
    /// Moment gradient. The measure derivative at a point y is
    /// dpsi(y)^T h_m.
    pub h_m: Array1<f64>,
    pub h_xx: Array2<f64>,
    pub h_xm: Array2<f64>,
    pub h_mm: Array2<f64>,
}

impl HamiltonianEval {
    /// d_mu H(theta)(y), a d-vector.
    pub fn h_mu_at(&self, map: &MomentMap, y: &[f64]) -> Array1<f64> {
        let dpsi = map.dpsi(y);
        let d = map.d();
        let mut out = Array1::zeros(d);
        for a in 0..d {
            for k in 0..map.k() {
                out[a] += self.h_m[k] * dpsi[[k, a]];
            }
        }
        out
    }

    /// d_y d_mu H(theta)(y), a d x d matrix.
    pub fn h_y_mu_at(&self, map: &MomentMap, y: &[f64]) -> Array2<f64> {
        let d2 = map.d2psi(y);
        let d = map.d();
        let mut out = Array2::zeros((d, d));
        for a in 0..d {
            for b in 0..d {
                for k in 0..map.k() {
                    out[[a, b]] += self.h_m[k] * d2[[k, a, b]];
                }
            }
        }
        out
    }

    /// d_x d_mu H(theta)(y), a d x d matrix with the x-derivative on rows.
    pub fn h_x_mu_at(&self, map: &MomentMap, y: &[f64]) -> Array2<f64> {
        let dpsi = map.dpsi(y);
        let d = map.d();
        let mut out = Array2::zeros((d, d));
        for a in 0..d {
            for b in 0..d {
                for k in 0..map.k() {
                    out[[a, b]] += self.h_xm[[a, k]] * dpsi[[k, b]];
                }
            }
        }
        out
    }

    /// d2_mu H(theta)(y, yhat), a d x d matrix pairing the two copies.
    pub fn h_mu_mu_at(&self, map: &MomentMap, y: &[f64], yhat: &[f64]) -> Array2<f64> {
        let dy = map.dpsi(y);
        let dyh = map.dpsi(yhat);
        let d = map.d();
        let mut out = Array2::zeros((d, d));
        for a in 0..d {
            for b in 0..d {
                for k in 0..map.k() {
                    for l in 0..map.k() {
                        out[[a, b]] += dy[[k, a]] * self.h_mm[[k, l]] * dyh[[l, b]];
                    }
                }
            }
        }
        out
    }
}

/// Just the scalar H, for control search loops.
pub fn hamiltonian_value(
    model: &dyn Coefficients,
    t: f64,
    x: &[f64],
    m: &[f64],
    u: &[f64],
    p: &[f64],
    q: ArrayView2<'_, f64>,
) -> f64 {
    let a = model.drift(t, x, m, u);
    let b = model.diffusion(t, x, m, u);
    let mut v = model.running_cost(t, x, m, u);
    for i in 0..p.len() {
        v += a[i] * p[i];
    }
    for (bv, qv) in b.iter().zip(q.iter()) {
        v += bv * qv;
    }
    v
}

/// Full evaluation with all second-derivative blocks. `q` has shape (d, dw).
pub fn hamiltonian(
    model: &dyn Coefficients,
    t: f64,
    x: &[f64],
    m: &[f64],
    u: &[f64],
    p: &[f64],
    q: ArrayView2<'_, f64>,
) -> Result<HamiltonianEval> {
    if !model.control_set().contains(u) {
        return Err(Error::Control(format!(
            "control point {u:?} outside the admissible set"
        )));
    }
    let dims = model.dims();
    let (d, dw) = (dims.d, dims.dw);
    let k = model.moment_map().k();
    if q.dim() != (d, dw) {
        return Err(Error::Dimension(format!(
            "q must be {d} x {dw}, got {:?}",
            q.dim()
        )));
    }

    let value = hamiltonian_value(model, t, x, m, u, p, q);

    let ax = model.drift_x(t, x, m, u);
    let am = model.drift_m(t, x, m, u);
    let bx = model.diffusion_x(t, x, m, u);
    let bm = model.diffusion_m(t, x, m, u);

    let mut h_x = model.running_cost_x(t, x, m, u);
    let mut h_m = model.running_cost_m(t, x, m, u);
    for a in 0..d {
        for i in 0..d {
            h_x[a] += ax[[i, a]] * p[i];
            for c in 0..dw {
                h_x[a] += bx[[c, i, a]] * q[[i, c]];
            }
        }
    }
    for kk in 0..k {
        for i in 0..d {
            h_m[kk] += am[[i, kk]] * p[i];
            for c in 0..dw {
                h_m[kk] += bm[[c, i, kk]] * q[[i, c]];
            }
        }
    }

    let axx = model.drift_xx(t, x, m, u);
    let axm = model.drift_xm(t, x, m, u);
    let amm = model.drift_mm(t, x, m, u);
    let bxx = model.diffusion_xx(t, x, m, u);
    let bxm = model.diffusion_xm(t, x, m, u);
    let bmm = model.diffusion_mm(t, x, m, u);

    let mut h_xx = model.running_cost_xx(t, x, m, u);
    let mut h_xm = model.running_cost_xm(t, x, m, u);
    let mut h_mm = model.running_cost_mm(t, x, m, u);
    for i in 0..d {
        for a in 0..d {
            for b in 0..d {
                h_xx[[a, b]] += axx[[i, a, b]] * p[i];
            }
            for kk in 0..k {
                h_xm[[a, kk]] += axm[[i, a, kk]] * p[i];
            }
        }
        for kk in 0..k {
            for ll in 0..k {
                h_mm[[kk, ll]] += amm[[i, kk, ll]] * p[i];
            }
        }
        for c in 0..dw {
            let qic = q[[i, c]];
            for a in 0..d {
                for b in 0..d {
                    h_xx[[a, b]] += bxx[[c, i, a, b]] * qic;
                }
                for kk in 0..k {
                    h_xm[[a, kk]] += bxm[[c, i, a, kk]] * qic;
                }
            }
            for kk in 0..k {
                for ll in 0..k {
                    h_mm[[kk, ll]] += bmm[[c, i, kk, ll]] * qic;
                }
            }
        }
    }

    Ok(HamiltonianEval {
        value,
        h_x,
        h_m,
        h_xx,
        h_xm,
        h_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    struct ZeroModel {
        map: MomentMap,
        set: super::super::model::ControlSet,
    }

    impl Coefficients for ZeroModel {
        fn name(&self) -> &str {
            "zero"
        }
        fn dims(&self) -> super::super::model::Dims {
            super::super::model::Dims { d: 1, dw: 1, du: 1 }
        }
        fn moment_map(&self) -> &MomentMap {
            &self.map
        }
        fn control_set(&self) -> &super::super::model::ControlSet {
            &self.set
        }
        fn drift(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
            Array1::zeros(1)
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

    // d = 1, A = x u, B = 1, f = u^2 / 2.
    struct DriftControlToy {
        map: MomentMap,
        set: super::super::model::ControlSet,
    }

    impl Coefficients for DriftControlToy {
        fn name(&self) -> &str {
            "drift-control-toy"
        }
        fn dims(&self) -> super::super::model::Dims {
            super::super::model::Dims { d: 1, dw: 1, du: 1 }
        }
        fn moment_map(&self) -> &MomentMap {
            &self.map
        }
        fn control_set(&self) -> &super::super::model::ControlSet {
            &self.set
        }
        fn drift(&self, _t: f64, x: &[f64], _m: &[f64], u: &[f64]) -> Array1<f64> {
            arr1(&[x[0] * u[0]])
        }
        fn drift_x(&self, _t: f64, _x: &[f64], _m: &[f64], u: &[f64]) -> Array2<f64> {
            arr2(&[[u[0]]])
        }
        fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
            arr2(&[[1.0]])
        }
        fn running_cost(&self, _t: f64, _x: &[f64], _m: &[f64], u: &[f64]) -> f64 {
            0.5 * u[0] * u[0]
        }
        fn terminal_cost(&self, _x: &[f64], _m: &[f64]) -> f64 {
            0.0
        }
    }

    fn box_set() -> super::super::model::ControlSet {
        super::super::model::ControlSet::Box {
            lo: vec![-2.0],
            hi: vec![2.0],
            grid: 5,
        }
    }

    #[test]
    fn zero_coefficients_give_zero_value() {
        let model = ZeroModel {
            map: MomentMap::identity(1),
            set: box_set(),
        };
        let q = arr2(&[[0.7]]);
        let h = hamiltonian(&model, 0.3, &[1.0], &[0.5], &[0.0], &[2.0], q.view()).unwrap();
        assert_eq!(h.value, 0.0);
        assert_eq!(h.h_x[0], 0.0);
        assert_eq!(h.h_mm[[0, 0]], 0.0);
    }

    #[test]
    fn drift_control_toy_value() {
        let model = DriftControlToy {
            map: MomentMap::identity(1),
            set: box_set(),
        };
        // <A, p> = (2 * 1) * 3 = 6, <B, q> = 0.5, f = 0.5.
        let q = arr2(&[[0.5]]);
        let h = hamiltonian(&model, 0.0, &[2.0], &[0.0], &[1.0], &[3.0], q.view()).unwrap();
        assert!((h.value - 7.0).abs() < 1e-15);
        assert_eq!(
            h.value,
            hamiltonian_value(&model, 0.0, &[2.0], &[0.0], &[1.0], &[3.0], q.view())
        );
        // A is linear in x and f is x-free, so H_xx vanishes.
        assert_eq!(h.h_xx[[0, 0]], 0.0);
        // H_x = u p = 3.
        assert!((h.h_x[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn control_outside_the_set_is_rejected() {
        let model = DriftControlToy {
            map: MomentMap::identity(1),
            set: box_set(),
        };
        let q = arr2(&[[0.0]]);
        assert!(matches!(
            hamiltonian(&model, 0.0, &[0.0], &[0.0], &[5.0], &[0.0], q.view()),
            Err(crate::Error::Control(_))
        ));
    }

    #[test]
    fn measure_kernels_assemble_through_the_moment_map() {
        // With psi = (x, x^2), h_m = (2, 3): d_mu H(y) = 2 + 3 * 2y, and
        // d_y d_mu H(y) = 6.
        let map = MomentMap::powers_1d(2);
        let eval = HamiltonianEval {
            value: 0.0,
            h_x: Array1::zeros(1),
            h_m: arr1(&[2.0, 3.0]),
            h_xx: Array2::zeros((1, 1)),
            h_xm: arr2(&[[1.0, 4.0]]),
            h_mm: arr2(&[[0.0, 0.0], [0.0, 5.0]]),
        };
        let y = [0.7];
        let gmu = eval.h_mu_at(&map, &y);
        assert!((gmu[0] - (2.0 + 6.0 * 0.7)).abs() < 1e-14);
        let gymu = eval.h_y_mu_at(&map, &y);
        assert!((gymu[[0, 0]] - 6.0).abs() < 1e-14);
        let gxmu = eval.h_x_mu_at(&map, &y);
        assert!((gxmu[[0, 0]] - (1.0 + 4.0 * 2.0 * 0.7)).abs() < 1e-14);
        let gmumu = eval.h_mu_mu_at(&map, &y, &[0.2]);
        assert!((gmumu[[0, 0]] - 5.0 * (2.0 * 0.7) * (2.0 * 0.2)).abs() < 1e-14);
    }
}
