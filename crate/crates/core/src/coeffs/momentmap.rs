//! The moment coordinates psi and their state derivatives.

use ndarray::{Array2, Array3};

/// psi: R^d -> R^K with monomial coordinates psi_k(x) = prod_a x_a^{e_{k,a}}.
///
/// Every measure argument in the library is the vector of ensemble means of
/// these coordinates, so dpsi and d2psi are the only state derivatives the
/// chain rule ever needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentMap {
    d: usize,
    exps: Vec<Vec<u32>>,
}

impl MomentMap {
    /// Monomials given by explicit multi-indices (one per moment coordinate).
    pub fn monomials(d: usize, exps: Vec<Vec<u32>>) -> Self {
        assert!(d > 0, "state dimension must be positive");
        assert!(!exps.is_empty(), "need at least one moment coordinate");
        for e in &exps {
            assert_eq!(e.len(), d, "multi-index length must equal d");
        }
        Self { d, exps }
    }

    /// psi(x) = x, so the measure enters through the plain mean.
    pub fn identity(d: usize) -> Self {
        let exps = (0..d)
            .map(|a| (0..d).map(|b| u32::from(a == b)).collect())
            .collect();
        Self::monomials(d, exps)
    }

    /// Scalar powers x, x^2, ..., x^degree (d = 1).
    pub fn powers_1d(degree: u32) -> Self {
        assert!(degree >= 1);
        Self::monomials(1, (1..=degree).map(|p| vec![p]).collect())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.exps.len()
    }

    /// True when every coordinate has total degree <= 1, i.e. dpsi is
    /// state-independent. The exact-transport adjoint backend on pair space
    /// relies on this.
    pub fn is_affine(&self) -> bool {
        self.exps
            .iter()
            .all(|e| e.iter().map(|&p| p as u64).sum::<u64>() <= 1)
    }

    pub fn psi(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d);
        self.exps.iter().map(|e| monomial(x, e)).collect()
    }

    /// Jacobian, shape (K, d): dpsi[[k, a]] = d psi_k / d x_a.
    pub fn dpsi(&self, x: &[f64]) -> Array2<f64> {
        debug_assert_eq!(x.len(), self.d);
        let mut out = Array2::zeros((self.k(), self.d));
        for (k, e) in self.exps.iter().enumerate() {
            for a in 0..self.d {
                out[[k, a]] = monomial_dx(x, e, a);
            }
        }
        out
    }

    /// Per-coordinate Hessians, shape (K, d, d).
    pub fn d2psi(&self, x: &[f64]) -> Array3<f64> {
        debug_assert_eq!(x.len(), self.d);
        let mut out = Array3::zeros((self.k(), self.d, self.d));
        for (k, e) in self.exps.iter().enumerate() {
            for a in 0..self.d {
                for b in 0..self.d {
                    out[[k, a, b]] = monomial_dxdx(x, e, a, b);
                }
            }
        }
        out
    }
}

fn ipow(x: f64, p: u32) -> f64 {
    x.powi(p as i32)
}

fn monomial(x: &[f64], e: &[u32]) -> f64 {
    x.iter().zip(e).map(|(&xi, &p)| ipow(xi, p)).product()
}

fn monomial_dx(x: &[f64], e: &[u32], a: usize) -> f64 {
    if e[a] == 0 {
        return 0.0;
    }
    let mut v = e[a] as f64 * ipow(x[a], e[a] - 1);
    for (b, (&xb, &p)) in x.iter().zip(e).enumerate() {
        if b != a {
            v *= ipow(xb, p);
        }
    }
    v
}

fn monomial_dxdx(x: &[f64], e: &[u32], a: usize, b: usize) -> f64 {
    if a == b {
        if e[a] < 2 {
            return 0.0;
        }
        let mut v = (e[a] * (e[a] - 1)) as f64 * ipow(x[a], e[a] - 2);
        for (c, (&xc, &p)) in x.iter().zip(e).enumerate() {
            if c != a {
                v *= ipow(xc, p);
            }
        }
        v
    } else {
        if e[a] == 0 || e[b] == 0 {
            return 0.0;
        }
        // Multiply in index order so the result is bitwise symmetric in (a, b).
        let (lo, hi) = (a.min(b), a.max(b));
        let mut v = (e[lo] * e[hi]) as f64;
        v *= ipow(x[lo], e[lo] - 1);
        v *= ipow(x[hi], e[hi] - 1);
        for (c, (&xc, &p)) in x.iter().zip(e).enumerate() {
            if c != a && c != b {
                v *= ipow(xc, p);
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(analytic: f64, fd: f64) -> f64 {
        (analytic - fd).abs() / fd.abs().max(1.0)
    }

    #[test]
    fn identity_map_returns_state() {
        let map = MomentMap::identity(3);
        let x = [0.5, -1.5, 2.0];
        assert_eq!(map.psi(&x), x.to_vec());
        let j = map.dpsi(&x);
        for k in 0..3 {
            for a in 0..3 {
                assert_eq!(j[[k, a]], f64::from(u8::from(k == a)));
            }
        }
        assert!(map.is_affine());
    }

    #[test]
    fn power_map_is_not_affine() {
        assert!(!MomentMap::powers_1d(2).is_affine());
        assert!(MomentMap::powers_1d(1).is_affine());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let maps = [
            MomentMap::identity(2),
            MomentMap::powers_1d(3),
            MomentMap::monomials(3, vec![vec![1, 1, 0], vec![0, 2, 1], vec![1, 0, 2]]),
        ];
        let h = 1e-5;
        for map in &maps {
            for _ in 0..100 {
                let x: Vec<f64> = (0..map.d()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let j = map.dpsi(&x);
                for a in 0..map.d() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += h;
                    xm[a] -= h;
                    let fp = map.psi(&xp);
                    let fm = map.psi(&xm);
                    for k in 0..map.k() {
                        let fd = (fp[k] - fm[k]) / (2.0 * h);
                        assert!(
                            rel_err(j[[k, a]], fd) <= 1e-6,
                            "dpsi[{k},{a}] mismatch: {} vs {}",
                            j[[k, a]],
                            fd
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let map = MomentMap::monomials(2, vec![vec![2, 1], vec![3, 0], vec![1, 1]]);
        let h = 1e-5;
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let hess = map.d2psi(&x);
            for b in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[b] += h;
                xm[b] -= h;
                let jp = map.dpsi(&xp);
                let jm = map.dpsi(&xm);
                for k in 0..map.k() {
                    for a in 0..2 {
                        let fd = (jp[[k, a]] - jm[[k, a]]) / (2.0 * h);
                        assert!(
                            rel_err(hess[[k, a, b]], fd) <= 1e-6,
                            "d2psi[{k},{a},{b}] mismatch"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hessians_are_symmetric() {
        let map = MomentMap::monomials(3, vec![vec![2, 1, 1], vec![0, 3, 2]]);
        let x = [0.7, -0.3, 1.1];
        let hess = map.d2psi(&x);
        for k in 0..map.k() {
            for a in 0..3 {
                for b in 0..3 {
                    assert_eq!(hess[[k, a, b]], hess[[k, b, a]]);
                }
            }
        }
    }
}
