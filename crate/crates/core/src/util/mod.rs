pub mod linalg;
pub mod ode;
pub mod stats;
