//! Spike variations of the control and their first and second order
//! correction flows, plus the empirical order study built on them.

pub mod flows;
pub mod order;

pub use flows::{build_bundle, build_bundle_from, variation_flows, VariationBundle, VariationFlows};
pub use order::{order_study, OrderPoint, OrderStudy, QuantityOrder};
