//! Polynomial regression used for the conditional expectations inside the
//! backward sweeps.
//!
//! Features are all monomials up to a total degree, enumerated in graded
//! lexicographic order so the layout is deterministic. The solve goes through
//! the normal equations with a trace-scaled ridge, and every fit is checked
//! for in-sample orthogonality of the residuals against the features, which
//! a least squares solution must satisfy up to the ridge perturbation.

use ndarray::{Array2, ArrayView2};

use crate::util::linalg::ridge_solve;
use crate::{Error, Result};

/// Monomial features of total degree at most `degree` over `dim` variables.
#[derive(Debug, Clone)]
pub struct PolyFeatures {
    pub dim: usize,
    pub degree: usize,
    exps: Vec<Vec<u32>>,
}

fn enumerate_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    // Graded lexicographic: all exponent vectors of total degree 0, then 1,
    // and so on, each block in lexicographic order.
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut stack = vec![(Vec::new(), total)];
        while let Some((prefix, left)) = stack.pop() {
            if prefix.len() == dim - 1 {
                let mut e = prefix;
                e.push(left);
                out.push(e);
                continue;
            }
            // Push in reverse so the lexicographically smallest pops first.
            for v in (0..=left).rev() {
                let mut next = prefix.clone();
                next.push(v);
                stack.push((next, left - v));
            }
        }
    }
    out
}

impl PolyFeatures {
    pub fn new(dim: usize, degree: usize) -> Self {
        assert!(dim > 0, "features need at least one variable");
        Self {
            dim,
            degree,
            exps: enumerate_exponents(dim, degree),
        }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        self.exps
            .iter()
            .map(|e| {
                e.iter()
                    .zip(x)
                    .map(|(&p, &v)| v.powi(p as i32))
                    .product::<f64>()
            })
            .collect()
    }

    /// Row-wise feature matrix for a batch of points, (batch, features).
    pub fn eval_batch(&self, xs: &[&[f64]]) -> Array2<f64> {
        let mut out = Array2::zeros((xs.len(), self.len()));
        for (i, x) in xs.iter().enumerate() {
            for (j, v) in self.eval(x).into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Gradient of every feature at a point, (features, dim).
    pub fn grad(&self, x: &[f64]) -> Array2<f64> {
        debug_assert_eq!(x.len(), self.dim);
        let mut out = Array2::zeros((self.len(), self.dim));
        for (f, e) in self.exps.iter().enumerate() {
            for a in 0..self.dim {
                let p = e[a];
                if p == 0 {
                    continue;
                }
                let mut v = p as f64 * x[a].powi(p as i32 - 1);
                for (b, &pb) in e.iter().enumerate() {
                    if b != a {
                        v *= x[b].powi(pb as i32);
                    }
                }
                out[[f, a]] = v;
            }
        }
        out
    }
}

/// A fitted least squares map from features to targets.
#[derive(Debug, Clone)]
pub struct Regression {
    /// (features, targets)
    pub coeffs: Array2<f64>,
}

impl Regression {
    pub fn predict_into(&self, feats: &[f64], out: &mut [f64]) {
        debug_assert_eq!(feats.len(), self.coeffs.nrows());
        debug_assert_eq!(out.len(), self.coeffs.ncols());
        for (t, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (f, v) in feats.iter().enumerate() {
                s += v * self.coeffs[[f, t]];
            }
            *o = s;
        }
    }
}

/// Least squares fit of every target column onto the feature columns. The
/// batch must outnumber the features ten to one: conditional expectations
/// estimated from fewer samples per coefficient are noise dressed up as
/// structure. `ridge` is relative, scaled by the mean Gram diagonal.
pub fn regress_conditional(
    step: usize,
    feats: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    ridge: f64,
) -> Result<Regression> {
    let batch = feats.nrows();
    let nf = feats.ncols();
    let nt = targets.ncols();
    if targets.nrows() != batch {
        return Err(Error::Dimension(format!(
            "{batch} feature rows against {} target rows",
            targets.nrows()
        )));
    }
    if batch < 10 * nf {
        return Err(Error::Regression {
            step,
            detail: format!("{batch} samples cannot support {nf} features (need 10 per feature)"),
        });
    }

    let mut gram = Array2::<f64>::zeros((nf, nf));
    for row in feats.rows() {
        for i in 0..nf {
            for j in 0..=i {
                gram[[i, j]] += row[i] * row[j];
            }
        }
    }
    for i in 0..nf {
        for j in 0..i {
            gram[[j, i]] = gram[[i, j]];
        }
    }
    let trace: f64 = gram.diag().sum();
    let lambda = ridge * trace / nf as f64;

    let mut coeffs = Array2::<f64>::zeros((nf, nt));
    let mut xty = ndarray::Array1::<f64>::zeros(nf);
    for t in 0..nt {
        xty.fill(0.0);
        for (row, y) in feats.rows().into_iter().zip(targets.column(t)) {
            for i in 0..nf {
                xty[i] += row[i] * y;
            }
        }
        let beta = ridge_solve(gram.view(), xty.view(), lambda).map_err(|e| Error::Regression {
            step,
            detail: format!("normal equations failed: {e}"),
        })?;

        // Exactness of the stationarity condition: X^T (y - X beta) equals
        // lambda beta, anything beyond that is a broken solve.
        let gb = gram.dot(&beta);
        let mut worst = 0.0_f64;
        let mut scale = 1.0_f64;
        for i in 0..nf {
            worst = worst.max((xty[i] - gb[i] - lambda * beta[i]).abs());
            scale = scale.max(xty[i].abs()).max(gb[i].abs());
        }
        if worst > 1e-8 * scale {
            return Err(Error::Regression {
                step,
                detail: format!(
                    "residuals not orthogonal to features: {worst:.3e} against scale {scale:.3e}"
                ),
            });
        }
        for i in 0..nf {
            coeffs[[i, t]] = beta[i];
        }
    }
    Ok(Regression { coeffs })
}
