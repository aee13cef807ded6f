//! Small dense linear algebra for regression normal equations.
//!
//! The Gram systems solved here are tiny (basis sizes well below 30), so a
//! plain Cholesky factorization is all that is needed.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Solve `a x = b` for a symmetric positive definite `a` by Cholesky.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "solve_spd: {}x{} matrix with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    // Lower-triangular factor, row major.
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Solver(format!(
                        "matrix not positive definite at pivot {i} (value {s:.3e})"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Ok(x)
}

/// Solve the ridge least squares problem `min ||X beta - y||^2 + lambda ||beta||^2`
/// given the accumulated Gram matrix `X^T X` and moment vector `X^T y`.
/// `lambda` is added to the diagonal as given (callers scale it beforehand).
pub fn ridge_solve(
    gram: ArrayView2<f64>,
    xty: ArrayView1<f64>,
    lambda: f64,
) -> Result<Array1<f64>> {
    let mut a = gram.to_owned();
    for i in 0..a.nrows() {
        a[[i, i]] += lambda;
    }
    solve_spd(a.view(), xty)
}
