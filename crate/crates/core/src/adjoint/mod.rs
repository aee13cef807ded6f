//! Backward adjoint systems along a simulated ensemble: the costate pair,
//! the state-Hessian pair, and the pair-field over two independent replicas.

pub mod basis;
pub mod first;
pub mod second;
pub mod third;

pub use basis::{regress_conditional, PolyFeatures, Regression};
pub use first::{solve_first, Backend, FirstAdjoint, FirstAdjointSettings, QMode};
pub use second::{solve_second, SecondAdjoint, SecondAdjointSettings};
pub use third::{solve_third, PairSelection, ThirdAdjoint, ThirdAdjointSettings, ThirdVariant};

pub(crate) use third::static_pair_source;
