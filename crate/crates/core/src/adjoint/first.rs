//! The costate pair (p, q) along a simulated ensemble, solved backwards.
//!
//! Each step is an implicit Euler equation in p: the conditional expectation
//! of tomorrow's costate plus dt times today's driver, which itself contains
//! today's p through the transport and pooled measure terms. The fixed point
//! is resolved by sweeping until the update stalls at round-off.
//!
//! Two conditional-expectation backends exist. The deterministic one fits an
//! exact affine map from states to costates each sweep, valid whenever the
//! costate is affine in the state (linear dynamics with quadratic costs) and
//! guarded by a residual check so misuse fails loudly instead of silently.
//! The regression one is the generic least squares projection on polynomial
//! features, with the martingale part either projected on the increments or
//! taken as the state gradient of the fitted mean times the diffusion.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};

use super::basis::{regress_conditional, PolyFeatures};
use crate::coeffs::Coefficients;
use crate::forward::ParticleEnsemble;
use crate::util::linalg::solve_spd;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Deterministic,
    Regression,
}

/// How the martingale integrand is estimated in the regression backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QMode {
    /// Project tomorrow's costate onto the scaled Brownian increments.
    DwProjection,
    /// Differentiate the fitted conditional mean and multiply by the
    /// diffusion. Immune to the 1/dt noise blow-up of the projection.
    GradientOfConditionalMean,
}

#[derive(Debug, Clone)]
pub struct FirstAdjointSettings {
    pub backend: Backend,
    pub q_mode: QMode,
    pub degree: usize,
    pub ridge: f64,
    pub sweep_tol: f64,
    pub max_sweeps: usize,
}

impl Default for FirstAdjointSettings {
    fn default() -> Self {
        Self {
            backend: Backend::Regression,
            q_mode: QMode::DwProjection,
            degree: 2,
            ridge: 1e-8,
            sweep_tol: 1e-12,
            max_sweeps: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FirstAdjoint {
    /// (n, steps + 1, d)
    pub p: Array3<f64>,
    /// (n, steps, d, dw), the integrand on each cell.
    pub q: Array4<f64>,
}

impl FirstAdjoint {
    pub fn p_at(&self, i: usize, k: usize) -> Vec<f64> {
        self.p.slice(ndarray::s![i, k, ..]).to_vec()
    }

    /// q of particle i on cell k as a (d, dw) matrix.
    pub fn q_at(&self, i: usize, k: usize) -> Array2<f64> {
        self.q.slice(ndarray::s![i, k, .., ..]).to_owned()
    }
}

/// Exact affine least squares fit ys ~ gamma xs + lambda via the normal
/// equations on [1, x] features. Returns (gamma, lambda).
pub(crate) fn affine_fit(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = xs.nrows();
    let d = xs.ncols();
    let dout = ys.ncols();
    let nf = d + 1;
    let mut gram = Array2::<f64>::zeros((nf, nf));
    for i in 0..n {
        let mut feat = vec![1.0; nf];
        feat[1..].copy_from_slice(xs.row(i).as_slice().expect("contiguous state row"));
        for a in 0..nf {
            for b in 0..=a {
                gram[[a, b]] += feat[a] * feat[b];
            }
        }
    }
    for a in 0..nf {
        for b in 0..a {
            gram[[b, a]] = gram[[a, b]];
        }
    }
    let mut gamma = Array2::<f64>::zeros((dout, d));
    let mut lambda = Array1::<f64>::zeros(dout);
    let mut xty = Array1::<f64>::zeros(nf);
    for t in 0..dout {
        xty.fill(0.0);
        for i in 0..n {
            let y = ys[[i, t]];
            xty[0] += y;
            for a in 0..d {
                xty[1 + a] += xs[[i, a]] * y;
            }
        }
        let beta = solve_spd(gram.view(), xty.view()).map_err(|_| {
            Error::Solver(
                "affine fit is singular: the ensemble does not spread the state space".into(),
            )
        })?;
        lambda[t] = beta[0];
        for a in 0..d {
            gamma[[t, a]] = beta[1 + a];
        }
    }
    Ok((gamma, lambda))
}

fn affine_residual(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    gamma: &Array2<f64>,
    lambda: &Array1<f64>,
) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..xs.nrows() {
        for t in 0..ys.ncols() {
            let mut v = lambda[t];
            for a in 0..xs.ncols() {
                v += gamma[[t, a]] * xs[[i, a]];
            }
            worst = worst.max((ys[[i, t]] - v).abs());
        }
    }
    worst
}

/// Per-step coefficient snapshot for one particle, reused across sweeps.
struct Frozen {
    a_x: Array2<f64>,
    a_m: Array2<f64>,
    b_x: Array3<f64>,
    b_m: Array3<f64>,
    f_x: Array1<f64>,
    f_m: Array1<f64>,
    dpsi: Array2<f64>,
    drift: Array1<f64>,
    diffusion: Array2<f64>,
}

pub fn solve_first(
    model: &dyn Coefficients,
    ens: &ParticleEnsemble,
    settings: &FirstAdjointSettings,
) -> Result<FirstAdjoint> {
    let dims = model.dims();
    let map = model.moment_map();
    let n = ens.n();
    let steps = ens.grid.steps();
    let d = dims.d;
    let dwn = dims.dw;
    let kk = map.k();
    let dt = ens.grid.dt();
    if ens.states.len_of(Axis(2)) != d {
        return Err(Error::Dimension(format!(
            "ensemble carries {}-dimensional states, model wants {d}",
            ens.states.len_of(Axis(2))
        )));
    }

    let mut p: Array3<f64> = Array3::zeros((n, steps + 1, d));
    let mut q: Array4<f64> = Array4::zeros((n, steps, d, dwn));

    // Terminal condition: own gradient plus the pooled measure gradient
    // pulled back through the moment map.
    let m_t = ens.moments_at(steps);
    let mut gm_mean = vec![0.0; kk];
    for l in 0..n {
        let g = model.terminal_cost_m(ens.state(l, steps), m_t);
        for (acc, v) in gm_mean.iter_mut().zip(g.iter()) {
            *acc += v;
        }
    }
    gm_mean.iter_mut().for_each(|v| *v /= n as f64);
    for i in 0..n {
        let x = ens.state(i, steps);
        let gx = model.terminal_cost_x(x, m_t);
        let dpsi = map.dpsi(x);
        for comp in 0..d {
            let mut v = gx[comp];
            for (r, gm) in gm_mean.iter().enumerate() {
                v += dpsi[[r, comp]] * gm;
            }
            p[[i, steps, comp]] = v;
        }
    }

    let basis = PolyFeatures::new(d, settings.degree);

    for k in (0..steps).rev() {
        let t = ens.grid.knot(k);
        let m = ens.moments_at(k);
        let x_k = ens.states.index_axis(Axis(1), k);
        let x_next = ens.states.index_axis(Axis(1), k + 1);
        let p_next = p.index_axis(Axis(1), k + 1).to_owned();

        let frozen: Vec<Frozen> = (0..n)
            .map(|i| {
                let x = ens.state(i, k);
                let u = ens.control(i, k);
                Frozen {
                    a_x: model.drift_x(t, x, m, u),
                    a_m: model.drift_m(t, x, m, u),
                    b_x: model.diffusion_x(t, x, m, u),
                    b_m: model.diffusion_m(t, x, m, u),
                    f_x: model.running_cost_x(t, x, m, u),
                    f_m: model.running_cost_m(t, x, m, u),
                    dpsi: map.dpsi(x),
                    drift: model.drift(t, x, m, u),
                    diffusion: model.diffusion(t, x, m, u),
                }
            })
            .collect();

        // Conditional expectation of tomorrow's costate, and q where it does
        // not depend on the running sweep.
        let mut ce = Array2::<f64>::zeros((n, d));
        let mut q_k = Array3::<f64>::zeros((n, d, dwn));
        match settings.backend {
            Backend::Deterministic => {
                let (gamma, lambda) = affine_fit(x_next, p_next.view())?;
                let scale = 1.0 + p_next.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                let resid = affine_residual(x_next, p_next.view(), &gamma, &lambda);
                if resid > 1e-8 * scale {
                    return Err(Error::Solver(format!(
                        "costate at step {} is not affine in the state \
                         (residual {resid:.3e}); the deterministic backend does not apply",
                        k + 1
                    )));
                }
                for i in 0..n {
                    for comp in 0..d {
                        let mut v = lambda[comp];
                        for a in 0..d {
                            v += gamma[[comp, a]] * (x_k[[i, a]] + frozen[i].drift[a] * dt);
                        }
                        ce[[i, comp]] = v;
                    }
                }
            }
            Backend::Regression => {
                let feats_rows: Vec<Vec<f64>> = (0..n).map(|i| basis.eval(ens.state(i, k))).collect();
                let mut feats = Array2::<f64>::zeros((n, basis.len()));
                for (i, row) in feats_rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        feats[[i, j]] = *v;
                    }
                }
                let fit = regress_conditional(k, feats.view(), p_next.view(), settings.ridge)?;
                let mut out = vec![0.0; d];
                for i in 0..n {
                    fit.predict_into(&feats_rows[i], &mut out);
                    for comp in 0..d {
                        ce[[i, comp]] = out[comp];
                    }
                }
                match settings.q_mode {
                    QMode::DwProjection => {
                        let mut targets = Array2::<f64>::zeros((n, d * dwn));
                        for i in 0..n {
                            for comp in 0..d {
                                for c in 0..dwn {
                                    targets[[i, comp * dwn + c]] =
                                        p_next[[i, comp]] * ens.dw[[i, k, c]] / dt;
                                }
                            }
                        }
                        let qfit =
                            regress_conditional(k, feats.view(), targets.view(), settings.ridge)?;
                        let mut qi = vec![0.0; d * dwn];
                        for i in 0..n {
                            qfit.predict_into(&feats_rows[i], &mut qi);
                            for comp in 0..d {
                                for c in 0..dwn {
                                    q_k[[i, comp, c]] = qi[comp * dwn + c];
                                }
                            }
                        }
                    }
                    QMode::GradientOfConditionalMean => {
                        for i in 0..n {
                            let grad = basis.grad(ens.state(i, k));
                            // d(ce_comp)/dx_a = sum_f coeffs[f, comp] grad[f, a]
                            for comp in 0..d {
                                for c in 0..dwn {
                                    let mut v = 0.0;
                                    for a in 0..d {
                                        let mut slope = 0.0;
                                        for f in 0..basis.len() {
                                            slope += fit.coeffs[[f, comp]] * grad[[f, a]];
                                        }
                                        v += slope * frozen[i].diffusion[[a, c]];
                                    }
                                    q_k[[i, comp, c]] = v;
                                }
                            }
                        }
                    }
                }
            }
        }

        // Implicit sweeps on p_k.
        let mut p_cur = ce.clone();
        let mut converged = false;
        for _sweep in 0..settings.max_sweeps {
            if settings.backend == Backend::Deterministic {
                let (gamma, _lambda) = affine_fit(x_k, p_cur.view())?;
                for i in 0..n {
                    for comp in 0..d {
                        for c in 0..dwn {
                            let mut v = 0.0;
                            for a in 0..d {
                                v += gamma[[comp, a]] * frozen[i].diffusion[[a, c]];
                            }
                            q_k[[i, comp, c]] = v;
                        }
                    }
                }
            }

            // Pooled measure term, one vector shared by all particles.
            let mut t1 = vec![0.0; kk];
            for l in 0..n {
                let fr = &frozen[l];
                for r in 0..kk {
                    let mut v = fr.f_m[r];
                    for comp in 0..d {
                        v += fr.a_m[[comp, r]] * p_cur[[l, comp]];
                        for c in 0..dwn {
                            v += fr.b_m[[c, comp, r]] * q_k[[l, comp, c]];
                        }
                    }
                    t1[r] += v;
                }
            }
            t1.iter_mut().for_each(|v| *v /= n as f64);

            let mut diff = 0.0_f64;
            let mut scale = 0.0_f64;
            for i in 0..n {
                let fr = &frozen[i];
                for comp in 0..d {
                    let mut drv = fr.f_x[comp];
                    for a in 0..d {
                        drv += fr.a_x[[a, comp]] * p_cur[[i, a]];
                        for c in 0..dwn {
                            drv += fr.b_x[[c, a, comp]] * q_k[[i, a, c]];
                        }
                    }
                    for (r, t1v) in t1.iter().enumerate() {
                        drv += fr.dpsi[[r, comp]] * t1v;
                    }
                    let next = ce[[i, comp]] + dt * drv;
                    diff = diff.max((next - p_cur[[i, comp]]).abs());
                    scale = scale.max(next.abs());
                    p_cur[[i, comp]] = next;
                }
            }
            if diff <= settings.sweep_tol * (1.0 + scale) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence(format!(
                "implicit costate sweep stalled at step {k}"
            )));
        }

        for i in 0..n {
            for comp in 0..d {
                p[[i, k, comp]] = p_cur[[i, comp]];
                for c in 0..dwn {
                    q[[i, k, comp, c]] = q_k[[i, comp, c]];
                }
            }
        }
    }

    Ok(FirstAdjoint { p, q })
}
