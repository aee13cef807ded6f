//! The coefficient interface shared by every test problem, plus the
//! finite-difference checker that validates each derivative evaluator
//! against its parent.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::momentmap::MomentMap;
use crate::{Error, Result};

/// State, Brownian and control dimensions of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub dw: usize,
    pub du: usize,
}

/// The admissible control values. Finite sets list their points; boxes carry
/// a per-axis interval and a default search grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    Finite(Vec<Vec<f64>>),
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        grid: usize,
    },
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Finite(pts) => pts.first().map_or(0, Vec::len),
            ControlSet::Box { lo, .. } => lo.len(),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match self {
            ControlSet::Finite(pts) => pts
                .iter()
                .any(|p| p.len() == u.len() && p.iter().zip(u).all(|(a, b)| (a - b).abs() <= 1e-12)),
            ControlSet::Box { lo, hi, .. } => {
                u.len() == lo.len()
                    && u.iter()
                        .zip(lo.iter().zip(hi))
                        .all(|(v, (l, h))| *v >= l - 1e-12 && *v <= h + 1e-12)
            }
        }
    }

    /// Enumerates the search grid: the points themselves for a finite set, a
    /// tensor grid for a box.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        match self {
            ControlSet::Finite(pts) => pts.clone(),
            ControlSet::Box { lo, hi, grid } => {
                let g = (*grid).max(2);
                let mut pts: Vec<Vec<f64>> = vec![vec![]];
                for a in 0..lo.len() {
                    let mut next = Vec::with_capacity(pts.len() * g);
                    for base in &pts {
                        for s in 0..g {
                            let v = lo[a] + (hi[a] - lo[a]) * s as f64 / (g - 1) as f64;
                            let mut p = base.clone();
                            p.push(v);
                            next.push(p);
                        }
                    }
                    pts = next;
                }
                pts
            }
        }
    }
}

/// Structural properties a solver may exploit. `affine_dynamics` asserts that
/// A and B are affine in x for fixed (t, m, u) and that f, g have
/// state-independent second derivatives, which makes the exact-transport
/// backward backend applicable (a runtime residual guard still verifies it).
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelFlags {
    pub affine_dynamics: bool,
}

/// Coefficients of the controlled dynamics and costs, with measure
/// dependence through the moment vector m. Index conventions:
/// drift_x[[i, a]] = dA_i/dx_a, diffusion_x[[c, i, a]] = dB_{i,c}/dx_a
/// (the Jacobian of the c-th diffusion column), and the mixed tensors
/// append the m-index last.
///
/// Derivatives default to zero so a model only spells out its nonzero
/// blocks; `check_model_derivatives` catches any forgotten override.
pub trait Coefficients: Send + Sync {
    fn name(&self) -> &str;
    fn dims(&self) -> Dims;
    fn moment_map(&self) -> &MomentMap;
    fn control_set(&self) -> &ControlSet;

    fn flags(&self) -> ModelFlags {
        ModelFlags::default()
    }

    fn drift(&self, t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array1<f64>;

    fn drift_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        let d = self.dims().d;
        Array2::zeros((d, d))
    }

    fn drift_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        let d = self.dims().d;
        Array2::zeros((d, self.moment_map().k()))
    }

    fn drift_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let d = self.dims().d;
        Array3::zeros((d, d, d))
    }

    fn drift_xm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let d = self.dims().d;
        Array3::zeros((d, d, self.moment_map().k()))
    }

    fn drift_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let d = self.dims().d;
        let k = self.moment_map().k();
        Array3::zeros((d, k, k))
    }

    fn diffusion(&self, t: f64, x: &[f64], m: &[f64], u: &[f64]) -> Array2<f64>;

    fn diffusion_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let Dims { d, dw, .. } = self.dims();
        Array3::zeros((dw, d, d))
    }

    fn diffusion_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array3<f64> {
        let Dims { d, dw, .. } = self.dims();
        Array3::zeros((dw, d, self.moment_map().k()))
    }

    fn diffusion_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array4<f64> {
        let Dims { d, dw, .. } = self.dims();
        Array4::zeros((dw, d, d, d))
    }

    fn diffusion_xm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array4<f64> {
        let Dims { d, dw, .. } = self.dims();
        Array4::zeros((dw, d, d, self.moment_map().k()))
    }

    fn diffusion_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array4<f64> {
        let Dims { d, dw, .. } = self.dims();
        let k = self.moment_map().k();
        Array4::zeros((dw, d, k, k))
    }

    fn running_cost(&self, t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64;

    fn running_cost_x(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
        Array1::zeros(self.dims().d)
    }

    fn running_cost_m(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array1<f64> {
        Array1::zeros(self.moment_map().k())
    }

    fn running_cost_xx(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        let d = self.dims().d;
        Array2::zeros((d, d))
    }

    fn running_cost_xm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        Array2::zeros((self.dims().d, self.moment_map().k()))
    }

    fn running_cost_mm(&self, _t: f64, _x: &[f64], _m: &[f64], _u: &[f64]) -> Array2<f64> {
        let k = self.moment_map().k();
        Array2::zeros((k, k))
    }

    fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64;

    fn terminal_cost_x(&self, _x: &[f64], _m: &[f64]) -> Array1<f64> {
        Array1::zeros(self.dims().d)
    }

    fn terminal_cost_m(&self, _x: &[f64], _m: &[f64]) -> Array1<f64> {
        Array1::zeros(self.moment_map().k())
    }

    fn terminal_cost_xx(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        let d = self.dims().d;
        Array2::zeros((d, d))
    }

    fn terminal_cost_xm(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        Array2::zeros((self.dims().d, self.moment_map().k()))
    }

    fn terminal_cost_mm(&self, _x: &[f64], _m: &[f64]) -> Array2<f64> {
        let k = self.moment_map().k();
        Array2::zeros((k, k))
    }
}

/// Step and tolerance for the derivative checker. The error measure is
/// |analytic - fd| / max(1, |fd|).
#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    pub step: f64,
    pub tol: f64,
    pub points: usize,
    pub seed: u64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-5,
            points: 100,
            seed: 0x5eed_c0ef,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DerivativeCheck {
    pub name: String,
    pub max_err: f64,
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub model: String,
    pub tol: f64,
    pub checks: Vec<DerivativeCheck>,
}

impl DerivativeReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.max_err <= self.tol)
    }

    pub fn worst(&self) -> Option<&DerivativeCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_err.total_cmp(&b.max_err))
    }

    pub fn failures(&self) -> Vec<&DerivativeCheck> {
        self.checks.iter().filter(|c| c.max_err > self.tol).collect()
    }
}

struct Point {
    t: f64,
    x: Vec<f64>,
    m: Vec<f64>,
    u: Vec<f64>,
}

fn sample_points(model: &dyn Coefficients, fd: &FdSettings) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(fd.seed);
    let Dims { d, .. } = model.dims();
    let k = model.moment_map().k();
    let grid = model.control_set().grid();
    (0..fd.points)
        .map(|_| Point {
            t: rng.random_range(0.0..1.0),
            x: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            m: (0..k).map(|_| rng.random_range(-1.5..1.5)).collect(),
            u: grid[rng.random_range(0..grid.len())].clone(),
        })
        .collect()
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Central difference of a vector-valued map in one coordinate of `x` or `m`.
fn central<F>(eval: F, base: &[f64], idx: usize, h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut plus = base.to_vec();
    let mut minus = base.to_vec();
    plus[idx] += h;
    minus[idx] -= h;
    let fp = eval(&plus);
    let fm = eval(&minus);
    fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// Validates every derivative evaluator of a model against central finite
/// differences of its parent evaluator, including the mixed blocks from both
/// differentiation orders (so Schwarz symmetry is checked operationally).
pub fn check_model_derivatives(model: &dyn Coefficients, fd: &FdSettings) -> Result<DerivativeReport> {
    let Dims { d, dw, .. } = model.dims();
    let k = model.moment_map().k();
    let points = sample_points(model, fd);
    let h = fd.step;

    let mut checks: Vec<DerivativeCheck> = Vec::new();
    let mut push = |name: &str, err: f64| match checks.iter_mut().find(|c| c.name == name) {
        Some(c) => c.max_err = c.max_err.max(err),
        None => checks.push(DerivativeCheck {
            name: name.to_string(),
            max_err: err,
        }),
    };

    for p in &points {
        let Point { t, x, m, u } = p;
        let t = *t;

        // First derivatives in x and m of A, B, f against their values.
        let ax = model.drift_x(t, x, m, u);
        let am = model.drift_m(t, x, m, u);
        for a in 0..d {
            let fd_col = central(|xx| model.drift(t, xx, m, u).to_vec(), x, a, h);
            for i in 0..d {
                push("drift_x", rel_err(ax[[i, a]], fd_col[i]));
            }
        }
        for kk in 0..k {
            let fd_col = central(|mm| model.drift(t, x, mm, u).to_vec(), m, kk, h);
            for i in 0..d {
                push("drift_m", rel_err(am[[i, kk]], fd_col[i]));
            }
        }

        let bx = model.diffusion_x(t, x, m, u);
        let bm = model.diffusion_m(t, x, m, u);
        for a in 0..d {
            let fd_col = central(
                |xx| model.diffusion(t, xx, m, u).iter().copied().collect(),
                x,
                a,
                h,
            );
            for i in 0..d {
                for c in 0..dw {
                    push("diffusion_x", rel_err(bx[[c, i, a]], fd_col[i * dw + c]));
                }
            }
        }
        for kk in 0..k {
            let fd_col = central(
                |mm| model.diffusion(t, x, mm, u).iter().copied().collect(),
                m,
                kk,
                h,
            );
            for i in 0..d {
                for c in 0..dw {
                    push("diffusion_m", rel_err(bm[[c, i, kk]], fd_col[i * dw + c]));
                }
            }
        }

        let fx = model.running_cost_x(t, x, m, u);
        let fm = model.running_cost_m(t, x, m, u);
        for a in 0..d {
            let fd_val = central(|xx| vec![model.running_cost(t, xx, m, u)], x, a, h)[0];
            push("running_cost_x", rel_err(fx[a], fd_val));
        }
        for kk in 0..k {
            let fd_val = central(|mm| vec![model.running_cost(t, x, mm, u)], m, kk, h)[0];
            push("running_cost_m", rel_err(fm[kk], fd_val));
        }

        let gx = model.terminal_cost_x(x, m);
        let gm = model.terminal_cost_m(x, m);
        for a in 0..d {
            let fd_val = central(|xx| vec![model.terminal_cost(xx, m)], x, a, h)[0];
            push("terminal_cost_x", rel_err(gx[a], fd_val));
        }
        for kk in 0..k {
            let fd_val = central(|mm| vec![model.terminal_cost(x, mm)], m, kk, h)[0];
            push("terminal_cost_m", rel_err(gm[kk], fd_val));
        }

        // Second derivatives against finite differences of the first.
        let axx = model.drift_xx(t, x, m, u);
        let axm = model.drift_xm(t, x, m, u);
        let amm = model.drift_mm(t, x, m, u);
        for b in 0..d {
            let fd_jac = central(|xx| model.drift_x(t, xx, m, u).iter().copied().collect(), x, b, h);
            for i in 0..d {
                for a in 0..d {
                    push("drift_xx", rel_err(axx[[i, a, b]], fd_jac[i * d + a]));
                }
            }
            // Mixed block, differentiating drift_m in x.
            let fd_m = central(|xx| model.drift_m(t, xx, m, u).iter().copied().collect(), x, b, h);
            for i in 0..d {
                for kk in 0..k {
                    push("drift_xm (d/dx of drift_m)", rel_err(axm[[i, b, kk]], fd_m[i * k + kk]));
                }
            }
        }
        for kk in 0..k {
            // Mixed block, differentiating drift_x in m.
            let fd_jac = central(|mm| model.drift_x(t, x, mm, u).iter().copied().collect(), m, kk, h);
            for i in 0..d {
                for a in 0..d {
                    push("drift_xm (d/dm of drift_x)", rel_err(axm[[i, a, kk]], fd_jac[i * d + a]));
                }
            }
            let fd_m = central(|mm| model.drift_m(t, x, mm, u).iter().copied().collect(), m, kk, h);
            for i in 0..d {
                for ll in 0..k {
                    push("drift_mm", rel_err(amm[[i, ll, kk]], fd_m[i * k + ll]));
                }
            }
        }

        let bxx = model.diffusion_xx(t, x, m, u);
        let bxm = model.diffusion_xm(t, x, m, u);
        let bmm = model.diffusion_mm(t, x, m, u);
        for b in 0..d {
            let fd_jac = central(|xx| model.diffusion_x(t, xx, m, u).iter().copied().collect(), x, b, h);
            let fd_m = central(|xx| model.diffusion_m(t, xx, m, u).iter().copied().collect(), x, b, h);
            for c in 0..dw {
                for i in 0..d {
                    for a in 0..d {
                        push(
                            "diffusion_xx",
                            rel_err(bxx[[c, i, a, b]], fd_jac[(c * d + i) * d + a]),
                        );
                    }
                    for kk in 0..k {
                        push(
                            "diffusion_xm (d/dx of diffusion_m)",
                            rel_err(bxm[[c, i, b, kk]], fd_m[(c * d + i) * k + kk]),
                        );
                    }
                }
            }
        }
        for kk in 0..k {
            let fd_jac = central(|mm| model.diffusion_x(t, x, mm, u).iter().copied().collect(), m, kk, h);
            let fd_m = central(|mm| model.diffusion_m(t, x, mm, u).iter().copied().collect(), m, kk, h);
            for c in 0..dw {
                for i in 0..d {
                    for a in 0..d {
                        push(
                            "diffusion_xm (d/dm of diffusion_x)",
                            rel_err(bxm[[c, i, a, kk]], fd_jac[(c * d + i) * d + a]),
                        );
                    }
                    for ll in 0..k {
                        push(
                            "diffusion_mm",
                            rel_err(bmm[[c, i, ll, kk]], fd_m[(c * d + i) * k + ll]),
                        );
                    }
                }
            }
        }

        let fxx = model.running_cost_xx(t, x, m, u);
        let fxm = model.running_cost_xm(t, x, m, u);
        let fmm = model.running_cost_mm(t, x, m, u);
        for b in 0..d {
            let fd_grad = central(|xx| model.running_cost_x(t, xx, m, u).to_vec(), x, b, h);
            let fd_m = central(|xx| model.running_cost_m(t, xx, m, u).to_vec(), x, b, h);
            for a in 0..d {
                push("running_cost_xx", rel_err(fxx[[a, b]], fd_grad[a]));
            }
            for kk in 0..k {
                push("running_cost_xm (d/dx of running_cost_m)", rel_err(fxm[[b, kk]], fd_m[kk]));
            }
        }
        for kk in 0..k {
            let fd_grad = central(|mm| model.running_cost_x(t, x, mm, u).to_vec(), m, kk, h);
            let fd_m = central(|mm| model.running_cost_m(t, x, mm, u).to_vec(), m, kk, h);
            for a in 0..d {
                push("running_cost_xm (d/dm of running_cost_x)", rel_err(fxm[[a, kk]], fd_grad[a]));
            }
            for ll in 0..k {
                push("running_cost_mm", rel_err(fmm[[ll, kk]], fd_m[ll]));
            }
        }

        let gxx = model.terminal_cost_xx(x, m);
        let gxm = model.terminal_cost_xm(x, m);
        let gmm = model.terminal_cost_mm(x, m);
        for b in 0..d {
            let fd_grad = central(|xx| model.terminal_cost_x(xx, m).to_vec(), x, b, h);
            let fd_m = central(|xx| model.terminal_cost_m(xx, m).to_vec(), x, b, h);
            for a in 0..d {
                push("terminal_cost_xx", rel_err(gxx[[a, b]], fd_grad[a]));
            }
            for kk in 0..k {
                push("terminal_cost_xm (d/dx of terminal_cost_m)", rel_err(gxm[[b, kk]], fd_m[kk]));
            }
        }
        for kk in 0..k {
            let fd_grad = central(|mm| model.terminal_cost_x(x, mm).to_vec(), m, kk, h);
            let fd_m = central(|mm| model.terminal_cost_m(x, mm).to_vec(), m, kk, h);
            for a in 0..d {
                push("terminal_cost_xm (d/dm of terminal_cost_x)", rel_err(gxm[[a, kk]], fd_grad[a]));
            }
            for ll in 0..k {
                push("terminal_cost_mm", rel_err(gmm[[ll, kk]], fd_m[ll]));
            }
        }

        // Symmetry of the pure second-derivative blocks.
        for a in 0..d {
            for b in 0..d {
                push("running_cost_xx symmetry", (fxx[[a, b]] - fxx[[b, a]]).abs());
                push("terminal_cost_xx symmetry", (gxx[[a, b]] - gxx[[b, a]]).abs());
            }
        }
    }

    if checks.iter().any(|c| !c.max_err.is_finite()) {
        return Err(Error::Numeric(
            "derivative check produced a non-finite error".into(),
        ));
    }

    Ok(DerivativeReport {
        model: model.name().to_string(),
        tol: fd.tol,
        checks,
    })
}
