//! Averages over an independent copy of the ensemble.
//!
//! Measure derivatives are evaluated either with the coefficient frozen at a
//! particle's own sample while the kernel argument runs over the copies, or
//! the other way round. Both reduce to the same double sum after a second
//! average, but per-particle they differ and the solvers need each one.

use ndarray::Array2;

/// Which argument of the kernel runs over the averaged copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TildeMode {
    /// out[i] = (1/N) sum_j kernel(i, j): the coefficient sits at particle i,
    /// the measure-derivative argument visits every copy j.
    CoefficientAtCopy,
    /// out[i] = (1/N) sum_j kernel(j, i): the coefficient visits every copy,
    /// the measure-derivative argument is particle i itself.
    CopyAtCoefficient,
}

/// Dense double-copy average. `kernel(c, p, out)` must add nothing and write
/// the full `len`-vector for coefficient index `c` evaluated at point index
/// `p`. Quadratic in the ensemble size; the solvers use factorised forms and
/// keep this as the reference they are checked against.
pub fn tilde_average<F>(mode: TildeMode, n: usize, len: usize, kernel: F) -> Array2<f64>
where
    F: Fn(usize, usize, &mut [f64]),
{
    let mut out = Array2::zeros((n, len));
    let mut buf = vec![0.0; len];
    for i in 0..n {
        let mut row = out.row_mut(i);
        for j in 0..n {
            let (c, p) = match mode {
                TildeMode::CoefficientAtCopy => (i, j),
                TildeMode::CopyAtCoefficient => (j, i),
            };
            buf.iter_mut().for_each(|v| *v = 0.0);
            kernel(c, p, &mut buf);
            for (dst, src) in row.iter_mut().zip(&buf) {
                *dst += *src;
            }
        }
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_kernel_averages_to_itself() {
        let out = tilde_average(TildeMode::CoefficientAtCopy, 5, 2, |_, _, b| {
            b[0] = 3.0;
            b[1] = -1.0;
        });
        for i in 0..5 {
            assert_eq!(out[[i, 0]], 3.0);
            assert_eq!(out[[i, 1]], -1.0);
        }
    }

    #[test]
    fn zero_kernel_averages_to_zero() {
        let out = tilde_average(TildeMode::CopyAtCoefficient, 4, 3, |_, _, _| {});
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn separable_kernels_factor_through_the_mode() {
        // kernel(c, p) = a_c * b_p. Freezing the coefficient at i averages b;
        // freezing the point at i averages a.
        let a = [1.0, 2.0, 4.0];
        let b = [1.0, -1.0, 3.0];
        let a_mean = a.iter().sum::<f64>() / 3.0;
        let b_mean = b.iter().sum::<f64>() / 3.0;
        let kernel = |c: usize, p: usize, out: &mut [f64]| out[0] = a[c] * b[p];

        let own = tilde_average(TildeMode::CoefficientAtCopy, 3, 1, kernel);
        let copy = tilde_average(TildeMode::CopyAtCoefficient, 3, 1, kernel);
        for i in 0..3 {
            assert!((own[[i, 0]] - a[i] * b_mean).abs() < 1e-15);
            assert!((copy[[i, 0]] - a_mean * b[i]).abs() < 1e-15);
        }
        // The second average agrees between the modes.
        let total_own = own.column(0).sum() / 3.0;
        let total_copy = copy.column(0).sum() / 3.0;
        assert!((total_own - total_copy).abs() < 1e-15);
        assert!((total_own - a_mean * b_mean).abs() < 1e-15);
    }
}
