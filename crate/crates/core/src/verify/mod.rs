//! Numerical verification of the identities the adjoint machinery promises.
//!
//! Everything here consumes simulated ensembles, variation flows, and solved
//! adjoint arrays, and reassembles both sides of each identity directly from
//! the model derivatives. The checks share one convention: left-knot Riemann
//! sums for time integrals, pathwise pairing of both sides on the same
//! particles so the Monte Carlo noise largely cancels, and a standard error
//! of the pathwise difference reported next to every residual.

mod cost;
mod duality;
mod expansion;
mod maxprin;

pub use cost::cost_functional;
pub use duality::{
    check_duality_py, check_duality_pyy, check_duality_pyy_scaled, check_duality_pz,
    check_duality_third, check_duality_third_scaled, AdjointStack, DualityResidual, PyyBreakdown,
    ThirdDualityResidual,
};
pub use expansion::{check_expansion, ExpansionReport};
pub use maxprin::{check_max_principle, MaxPrinReport, MaxPrinRow, UGrid};
