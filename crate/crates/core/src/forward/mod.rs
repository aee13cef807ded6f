//! Forward simulation: time grids, seeded noise, control laws, the
//! interacting-particle solver, and averaging over independent copies.

pub mod control;
pub mod grid;
pub mod rng;
pub mod sim;
pub mod tilde;

pub use control::{apply_spike, ControlLaw, SpikeVariation};
pub use grid::TimeGrid;
pub use rng::{draw_increments, draw_initial_states, particle_rng, role_seed};
pub use sim::{
    coarsen_increments, empirical_moments, simulate_mv_sde, simulate_with_increments,
    ParticleEnsemble,
};
pub use tilde::{tilde_average, TildeMode};
