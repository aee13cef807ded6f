//! Coefficient families for mean-field control problems.
//!
//! Measure dependence is restricted to moment functionals: every coefficient
//! sees the law of the state only through m = (1/N) sum psi(X^i) for a fixed
//! smooth map psi. Under that restriction all measure derivatives are exact
//! chain-rule expressions in the moment gradient and the derivatives of psi,
//! which is what makes the adjoint equations testable without a second layer
//! of numerical differentiation.

mod functional;
mod hamiltonian;
mod model;
mod momentmap;
mod problems;

pub use functional::{MomentFunctional, TaylorTerms};
pub use hamiltonian::{hamiltonian, hamiltonian_value, HamiltonianEval};
pub use model::{
    check_model_derivatives, Coefficients, ControlSet, DerivativeCheck, DerivativeReport, Dims,
    FdSettings, ModelFlags,
};
pub use momentmap::MomentMap;
pub use problems::{
    model_by_name, AnisoToy2d, CubicTerminalToy, LinearBsdeToy, Tp1, Tp2, Tp3, MODEL_NAMES,
};
