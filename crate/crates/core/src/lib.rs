//! Numerical verification lab for the second-order stochastic maximum principle
//! of mean-field (McKean-Vlasov) control problems.
//!
//! The library simulates interacting particle systems whose empirical measure
//! stands in for the law of the state, differentiates moment functionals of
//! that measure, propagates spike-variation sensitivities, solves the three
//! backward adjoint equations (pointwise first order, matrix second order, and
//! the pair-space second order equation obtained by Picard iteration), and then
//! checks the duality identities, the second-order cost expansion, and the
//! pointwise minimum condition that tie all of these together.
//!
//! Conventions used throughout:
//! * the measure argument of every coefficient is reduced to a moment vector
//!   `m = <psi, mu>` for a fixed moment map `psi`, so measure derivatives are
//!   assembled by the chain rule through `psi`;
//! * the Hamiltonian is `H = <A, p> + <B, q> + f`, the sign under which an
//!   optimal control minimizes `H` pointwise and the cost expansion balances;
//! * time grids are uniform; forward simulation is explicit Euler-Maruyama and
//!   backward solvers use one conditional-expectation step plus an implicit
//!   fixed-point sweep in the driver per step.

pub mod adjoint;
pub mod coeffs;
pub mod config;
pub mod error;
pub mod forward;
pub mod report;
pub mod riccati;
pub mod util;
pub mod variational;
pub mod verify;

pub use error::{Error, Result};
