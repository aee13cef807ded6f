//! Built-in coefficient models.
//!
//! All scalar models share the pattern d = dw = du = 1. Parameters are public
//! so experiments can reconfigure them; `model_by_name` constructs a model
//! from its registry name plus a key/value override map.

use std::collections::BTreeMap;

use ndarray::{arr1, arr2, Array1, Array2, Array3, Array4};

use super::model::{Coefficients, ControlSet, Dims, ModelFlags};
use super::momentmap::MomentMap;
use crate::{Error, Result};

pub const MODEL_NAMES: &[&str] = &[
    "tp1",
    "tp2",
    "tp3",
    "linear-bsde",
    "cubic-terminal",
    "aniso2d",
];

/// Mean-field linear-quadratic problem with drift control:
/// A = a x + abar m + b u, B = sigma, f = (r u^2 + c x^2 + cbar m^2) / 2,
/// g = (s x^2 + sbar m^2) / 2, with m the ensemble mean.
#[derive(Debug, Clone)]
pub struct Tp1 {
    pub a: f64,
    pub abar: f64,
    pub b: f64,
    pub sigma: f64,
    pub c: f64,
    pub cbar: f64,
    pub s: f64,
    pub sbar: f64,
    pub r: f64,
    map: MomentMap,
    set: ControlSet,
}

impl Default for Tp1 {
    fn default() -> Self {
        Self {
            a: 0.3,
            abar: 0.2,
            b: 1.0,
            sigma: 0.4,
            c: 0.5,
            cbar: 0.3,
            s: 1.0,
            sbar: 0.5,
            r: 1.0,
            map: MomentMap::identity(1),
            // Wide enough that the unconstrained linear-quadratic feedback
            // stays admissible for every particle the test sizes produce.
            set: ControlSet::Box {
                lo: vec![-6.0],
                hi: vec![6.0],
                grid: 41,
            },
        }
    }
}

impl Tp1 {
    /// The same problem with every measure coefficient removed; its adjoints
    /// collapse to scalar ODEs.
    pub fn without_measure_terms() -> Self {
        Self {
            abar: 0.0,
            cbar: 0.0,
            sbar: 0.0,
            ..Self::default()
        }
    }
}

impl Coefficients for Tp1 {
    fn name(&self) -> &str {
        "tp1"
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
    fn flags(&self) -> ModelFlags {
        ModelFlags {
            affine_dynamics: true,
        }
    }
    fn drift(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array1<f64> {
        arr1(&[self.a * x[0] + self.abar * m[0] + self.b * u[0]])
    }
    fn drift_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.a]])
    }
    fn drift_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.abar]])
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.sigma]])
    }
    fn running_cost(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64 {
        0.5 * (self.r * u[0] * u[0] + self.c * x[0] * x[0] + self.cbar * m[0] * m[0])
    }
    fn running_cost_x(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[self.c * x[0]])
    }
    fn running_cost_m(&self, _t: f64, _x: &[f64], m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[self.cbar * m[0]])
    }
    fn running_cost_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.c]])
    }
    fn running_cost_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.cbar]])
    }
    fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64 {
        0.5 * (self.s * x[0] * x[0] + self.sbar * m[0] * m[0])
    }
    fn terminal_cost_x(&self, x: &[f64], _m: &[f64]) -> Array1<f64> {
        arr1(&[self.s * x[0]])
    }
    fn terminal_cost_m(&self, _x: &[f64], m: &[f64]) -> Array1<f64> {
        arr1(&[self.sbar * m[0]])
    }
    fn terminal_cost_xx(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[self.s]])
    }
    fn terminal_cost_mm(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[self.sbar]])
    }
}

/// Diffusion-controlled linear-quadratic problem: as Tp1 but B = sigma u with
/// the two-point control set {-1, +1}, so spikes change the diffusion.
#[derive(Debug, Clone)]
pub struct Tp2 {
    pub a: f64,
    pub abar: f64,
    pub b: f64,
    pub sigma: f64,
    pub c: f64,
    pub cbar: f64,
    pub s: f64,
    pub sbar: f64,
    pub r: f64,
    map: MomentMap,
    set: ControlSet,
}

impl Default for Tp2 {
    fn default() -> Self {
        Self {
            a: 0.3,
            abar: 0.2,
            // Kept small relative to sigma so diffusion effects dominate the
            // drift response when the control flips sign.
            b: 0.3,
            sigma: 0.6,
            c: 0.5,
            cbar: 0.3,
            s: 1.0,
            sbar: 0.5,
            r: 0.5,
            map: MomentMap::identity(1),
            set: ControlSet::Finite(vec![vec![-1.0], vec![1.0]]),
        }
    }
}

impl Coefficients for Tp2 {
    fn name(&self) -> &str {
        "tp2"
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
    fn flags(&self) -> ModelFlags {
        ModelFlags {
            affine_dynamics: true,
        }
    }
    fn drift(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array1<f64> {
        arr1(&[self.a * x[0] + self.abar * m[0] + self.b * u[0]])
    }
    fn drift_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.a]])
    }
    fn drift_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.abar]])
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], u: &[f64]) -> Array2<f64> {
        arr2(&[[self.sigma * u[0]]])
    }
    fn running_cost(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64 {
        0.5 * (self.r * u[0] * u[0] + self.c * x[0] * x[0] + self.cbar * m[0] * m[0])
    }
    fn running_cost_x(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[self.c * x[0]])
    }
    fn running_cost_m(&self, _t: f64, _x: &[f64], m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[self.cbar * m[0]])
    }
    fn running_cost_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.c]])
    }
    fn running_cost_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.cbar]])
    }
    fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64 {
        0.5 * (self.s * x[0] * x[0] + self.sbar * m[0] * m[0])
    }
    fn terminal_cost_x(&self, x: &[f64], _m: &[f64]) -> Array1<f64> {
        arr1(&[self.s * x[0]])
    }
    fn terminal_cost_m(&self, _x: &[f64], m: &[f64]) -> Array1<f64> {
        arr1(&[self.sbar * m[0]])
    }
    fn terminal_cost_xx(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[self.s]])
    }
    fn terminal_cost_mm(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[self.sbar]])
    }
}

/// Nonlinear measure coupling through two moments m = (mean x, mean x^2):
/// A = a x + abar tanh(m1) + abreve m2 + b u,
/// B = sigma0 + sigma_x x + sigma_bar m1 + sigma_u u,
/// f = (r u^2 + c x^2) / 2 + cbar m2^2 / 2,
/// g = s x^2 / 2 + sbar m2^2 / 2 + s_xm x m1.
#[derive(Debug, Clone)]
pub struct Tp3 {
    pub a: f64,
    pub abar: f64,
    pub abreve: f64,
    pub b: f64,
    pub sigma0: f64,
    pub sigma_x: f64,
    pub sigma_bar: f64,
    pub sigma_u: f64,
    pub r: f64,
    pub c: f64,
    pub cbar: f64,
    pub s: f64,
    pub sbar: f64,
    pub s_xm: f64,
    map: MomentMap,
    set: ControlSet,
}

impl Default for Tp3 {
    fn default() -> Self {
        Self {
            a: 0.2,
            abar: 0.3,
            abreve: 0.15,
            b: 0.8,
            sigma0: 0.3,
            sigma_x: 0.2,
            sigma_bar: 0.2,
            sigma_u: 0.4,
            r: 1.0,
            c: 0.4,
            cbar: 0.3,
            s: 0.8,
            sbar: 0.4,
            s_xm: 0.25,
            map: MomentMap::powers_1d(2),
            set: ControlSet::Finite(vec![vec![-1.0], vec![1.0]]),
        }
    }
}

fn sech2(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

impl Coefficients for Tp3 {
    fn name(&self) -> &str {
        "tp3"
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
    fn flags(&self) -> ModelFlags {
        ModelFlags {
            affine_dynamics: true,
        }
    }
    fn drift(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array1<f64> {
        arr1(&[self.a * x[0] + self.abar * m[0].tanh() + self.abreve * m[1] + self.b * u[0]])
    }
    fn drift_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.a]])
    }
    fn drift_m(&self, _t: f64, _x: &[f64], m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.abar * sech2(m[0]), self.abreve]])
    }
    fn drift_mm(&self, _t: f64, _x: &[f64], m: &[f64], _u: &[f64]) -> Array3<f64> {
        let mut out = Array3::zeros((1, 2, 2));
        out[[0, 0, 0]] = -2.0 * self.abar * m[0].tanh() * sech2(m[0]);
        out
    }
    fn diffusion(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array2<f64> {
        arr2(&[[self.sigma0 + self.sigma_x * x[0] + self.sigma_bar * m[0] + self.sigma_u * u[0]]])
    }
    fn diffusion_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let mut out = Array3::zeros((1, 1, 1));
        out[[0, 0, 0]] = self.sigma_x;
        out
    }
    fn diffusion_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let mut out = Array3::zeros((1, 1, 2));
        out[[0, 0, 0]] = self.sigma_bar;
        out
    }
    fn running_cost(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64 {
        0.5 * (self.r * u[0] * u[0] + self.c * x[0] * x[0]) + 0.5 * self.cbar * m[1] * m[1]
    }
    fn running_cost_x(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[self.c * x[0]])
    }
    fn running_cost_m(&self, _t: f64, _x: &[f64], m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[0.0, self.cbar * m[1]])
    }
    fn running_cost_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.c]])
    }
    fn running_cost_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[0.0, 0.0], [0.0, self.cbar]])
    }
    fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64 {
        0.5 * self.s * x[0] * x[0] + 0.5 * self.sbar * m[1] * m[1] + self.s_xm * x[0] * m[0]
    }
    fn terminal_cost_x(&self, x: &[f64], m: &[f64]) -> Array1<f64> {
        arr1(&[self.s * x[0] + self.s_xm * m[0]])
    }
    fn terminal_cost_m(&self, x: &[f64], m: &[f64]) -> Array1<f64> {
        arr1(&[self.s_xm * x[0], self.sbar * m[1]])
    }
    fn terminal_cost_xx(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[self.s]])
    }
    fn terminal_cost_xm(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[self.s_xm, 0.0]])
    }
    fn terminal_cost_mm(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[0.0, 0.0], [0.0, self.sbar]])
    }
}

/// dX = a X dt + sigma dW with terminal cost x^2 / 2 and no running cost.
/// The first adjoint has the closed form p_t = exp(2a(T-t)) X_t,
/// q_t = sigma exp(2a(T-t)).
#[derive(Debug, Clone)]
pub struct LinearBsdeToy {
    pub a: f64,
    pub sigma: f64,
    map: MomentMap,
    set: ControlSet,
}

impl Default for LinearBsdeToy {
    fn default() -> Self {
        Self {
            a: 0.25,
            sigma: 0.3,
            map: MomentMap::identity(1),
            set: ControlSet::Finite(vec![vec![0.0]]),
        }
    }
}

impl Coefficients for LinearBsdeToy {
    fn name(&self) -> &str {
        "linear-bsde"
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
    fn flags(&self) -> ModelFlags {
        ModelFlags {
            affine_dynamics: true,
        }
    }
    fn drift(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[self.a * x[0]])
    }
    fn drift_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.a]])
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.sigma]])
    }
    fn running_cost(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost(&self, x: &[f64], _m: &[f64]) -> f64 {
        0.5 * x[0] * x[0]
    }
    fn terminal_cost_x(&self, x: &[f64], _m: &[f64]) -> Array1<f64> {
        arr1(&[x[0]])
    }
    fn terminal_cost_xx(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[1.0]])
    }
}

/// dX = sigma X dW with terminal cost x^3 / 6. Closed forms
/// p_t = X_t^2 exp(3 sigma^2 (T-t)) / 2, q_t = sigma X_t^2 exp(3 sigma^2 (T-t)),
/// P_t = X_t exp(3 sigma^2 (T-t)), Q_t = sigma X_t exp(3 sigma^2 (T-t))
/// exercise a genuinely state-dependent second adjoint.
#[derive(Debug, Clone)]
pub struct CubicTerminalToy {
    pub sigma: f64,
    map: MomentMap,
    set: ControlSet,
}

impl Default for CubicTerminalToy {
    fn default() -> Self {
        Self {
            sigma: 0.4,
            map: MomentMap::identity(1),
            set: ControlSet::Finite(vec![vec![0.0]]),
        }
    }
}

impl Coefficients for CubicTerminalToy {
    fn name(&self) -> &str {
        "cubic-terminal"
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
    fn diffusion(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[self.sigma * x[0]]])
    }
    fn diffusion_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let mut out = Array3::zeros((1, 1, 1));
        out[[0, 0, 0]] = self.sigma;
        out
    }
    fn running_cost(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost(&self, x: &[f64], _m: &[f64]) -> f64 {
        x[0] * x[0] * x[0] / 6.0
    }
    fn terminal_cost_x(&self, x: &[f64], _m: &[f64]) -> Array1<f64> {
        arr1(&[0.5 * x[0] * x[0]])
    }
    fn terminal_cost_xx(&self, x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[x[0]]])
    }
}

/// Two-dimensional model with anisotropic linear dynamics, a sin(x_2) bump in
/// one diffusion entry and mild moment coupling. Exists to exercise every
/// tensor index path at d = dw = K = 2.
#[derive(Debug, Clone)]
pub struct AnisoToy2d {
    map: MomentMap,
    set: ControlSet,
}

impl Default for AnisoToy2d {
    fn default() -> Self {
        Self {
            map: MomentMap::identity(2),
            set: ControlSet::Box {
                lo: vec![-1.0],
                hi: vec![1.0],
                grid: 5,
            },
        }
    }
}

const A2_A0: [[f64; 2]; 2] = [[-0.3, 0.1], [0.0, -0.2]];
const A2_A1: [[f64; 2]; 2] = [[0.15, 0.0], [0.05, 0.1]];
const A2_B: [f64; 2] = [0.5, -0.25];
const A2_C: [[f64; 2]; 2] = [[0.4, 0.1], [0.1, 0.3]];
const A2_S: [[f64; 2]; 2] = [[0.6, 0.0], [0.0, 0.5]];
const A2_CBAR: f64 = 0.2;
const A2_SXM: f64 = 0.1;

impl Coefficients for AnisoToy2d {
    fn name(&self) -> &str {
        "aniso2d"
    }
    fn dims(&self) -> Dims {
        Dims { d: 2, dw: 2, du: 1 }
    }
    fn moment_map(&self) -> &MomentMap {
        &self.map
    }
    fn control_set(&self) -> &ControlSet {
        &self.set
    }
    fn drift(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array1<f64> {
        let mut out = Array1::zeros(2);
        for i in 0..2 {
            out[i] = A2_B[i] * u[0];
            for j in 0..2 {
                out[i] += A2_A0[i][j] * x[j] + A2_A1[i][j] * m[j];
            }
        }
        out
    }
    fn drift_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&A2_A0)
    }
    fn drift_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&A2_A1)
    }
    fn diffusion(&self, _t: f64, x: &[f64], m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[
            [0.3 + 0.1 * x[1].sin(), 0.05],
            [0.0, 0.25 + 0.08 * m[1]],
        ])
    }
    fn diffusion_x(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let mut out = Array3::zeros((2, 2, 2));
        out[[0, 0, 1]] = 0.1 * x[1].cos();
        out
    }
    fn diffusion_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let mut out = Array3::zeros((2, 2, 2));
        out[[1, 1, 1]] = 0.08;
        out
    }
    fn diffusion_xx(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array4<f64> {
        let mut out = Array4::zeros((2, 2, 2, 2));
        out[[0, 0, 1, 1]] = -0.1 * x[1].sin();
        out
    }
    fn running_cost(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64 {
        let mut v = 0.5 * u[0] * u[0];
        for i in 0..2 {
            for j in 0..2 {
                v += 0.5 * x[i] * A2_C[i][j] * x[j];
            }
            v += 0.5 * A2_CBAR * m[i] * m[i];
        }
        v
    }
    fn running_cost_x(&self, _t: f64, x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
        let mut out = Array1::zeros(2);
        for i in 0..2 {
            for j in 0..2 {
                out[i] += A2_C[i][j] * x[j];
            }
        }
        out
    }
    fn running_cost_m(&self, _t: f64, _x: &[f64], m: &[f64], _u: &[f64]) -> Array1<f64> {
        arr1(&[A2_CBAR * m[0], A2_CBAR * m[1]])
    }
    fn running_cost_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&A2_C)
    }
    fn running_cost_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        arr2(&[[A2_CBAR, 0.0], [0.0, A2_CBAR]])
    }
    fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64 {
        let mut v = A2_SXM * x[0] * m[1];
        for i in 0..2 {
            for j in 0..2 {
                v += 0.5 * x[i] * A2_S[i][j] * x[j];
            }
        }
        v
    }
    fn terminal_cost_x(&self, x: &[f64], m: &[f64]) -> Array1<f64> {
        let mut out = arr1(&[A2_SXM * m[1], 0.0]);
        for i in 0..2 {
            for j in 0..2 {
                out[i] += A2_S[i][j] * x[j];
            }
        }
        out
    }
    fn terminal_cost_m(&self, x: &[f64], _m: &[f64]) -> Array1<f64> {
        arr1(&[0.0, A2_SXM * x[0]])
    }
    fn terminal_cost_xx(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&A2_S)
    }
    fn terminal_cost_xm(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        arr2(&[[0.0, A2_SXM], [0.0, 0.0]])
    }
}

/// Builds a registered model, applying parameter overrides by field name.
/// Unknown model names or parameter keys are config errors.
pub fn model_by_name(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<Box<dyn Coefficients>> {
    match name {
        "tp1" => {
            let mut m = Tp1::default();
            for (k, &v) in params {
                match k.as_str() {
                    "a" => m.a = v,
                    "abar" => m.abar = v,
                    "b" => m.b = v,
                    "sigma" => m.sigma = v,
                    "c" => m.c = v,
                    "cbar" => m.cbar = v,
                    "s" => m.s = v,
                    "sbar" => m.sbar = v,
                    "r" => m.r = v,
                    _ => return Err(Error::Config(format!("unknown tp1 parameter `{k}`"))),
                }
            }
            Ok(Box::new(m))
        }
        "tp2" => {
            let mut m = Tp2::default();
            for (k, &v) in params {
                match k.as_str() {
                    "a" => m.a = v,
                    "abar" => m.abar = v,
                    "b" => m.b = v,
                    "sigma" => m.sigma = v,
                    "c" => m.c = v,
                    "cbar" => m.cbar = v,
                    "s" => m.s = v,
                    "sbar" => m.sbar = v,
                    "r" => m.r = v,
                    _ => return Err(Error::Config(format!("unknown tp2 parameter `{k}`"))),
                }
            }
            Ok(Box::new(m))
        }
        "tp3" => {
            let mut m = Tp3::default();
            for (k, &v) in params {
                match k.as_str() {
                    "a" => m.a = v,
                    "abar" => m.abar = v,
                    "abreve" => m.abreve = v,
                    "b" => m.b = v,
                    "sigma0" => m.sigma0 = v,
                    "sigma_x" => m.sigma_x = v,
                    "sigma_bar" => m.sigma_bar = v,
                    "sigma_u" => m.sigma_u = v,
                    "r" => m.r = v,
                    "c" => m.c = v,
                    "cbar" => m.cbar = v,
                    "s" => m.s = v,
                    "sbar" => m.sbar = v,
                    "s_xm" => m.s_xm = v,
                    _ => return Err(Error::Config(format!("unknown tp3 parameter `{k}`"))),
                }
            }
            Ok(Box::new(m))
        }
        "linear-bsde" => {
            let mut m = LinearBsdeToy::default();
            for (k, &v) in params {
                match k.as_str() {
                    "a" => m.a = v,
                    "sigma" => m.sigma = v,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown linear-bsde parameter `{k}`"
                        )))
                    }
                }
            }
            Ok(Box::new(m))
        }
        "cubic-terminal" => {
            let mut m = CubicTerminalToy::default();
            for (k, &v) in params {
                match k.as_str() {
                    "sigma" => m.sigma = v,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown cubic-terminal parameter `{k}`"
                        )))
                    }
                }
            }
            Ok(Box::new(m))
        }
        "aniso2d" => {
            if let Some(k) = params.keys().next() {
                return Err(Error::Config(format!("aniso2d takes no parameter `{k}`")));
            }
            Ok(Box::new(AnisoToy2d::default()))
        }
        other => Err(Error::Config(format!("unknown model `{other}`"))),
    }
}
