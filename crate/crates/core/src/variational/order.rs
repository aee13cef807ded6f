//! Empirical convergence orders of the spike expansion.
//!
//! For a ladder of window widths the study rebuilds the bundle on fresh copies
//! of the same seeded noise, measures pathwise sup-norm moments of the
//! difference, the two flows, and the remainders, and fits log-log slopes.

use ndarray::{Array3, Axis};

use super::flows::{build_bundle, VariationBundle};
use crate::coeffs::Coefficients;
use crate::forward::{ControlLaw, SpikeVariation, TimeGrid};
use crate::util::stats::{fit_line, mean, stderr_of_mean, LineFit};
use crate::{Error, Result};

/// One measured point of the ladder.
#[derive(Debug, Clone)]
pub struct OrderPoint {
    pub eps: f64,
    pub stat: f64,
    pub stderr: f64,
}

/// A quantity tracked across the ladder with its fitted log-log line.
/// `fit` is absent when the quantity vanishes identically, which happens for
/// structural reasons on some problems and is worth surfacing as such.
#[derive(Debug, Clone)]
pub struct QuantityOrder {
    pub name: &'static str,
    pub points: Vec<OrderPoint>,
    pub fit: Option<LineFit>,
}

#[derive(Debug, Clone)]
pub struct OrderStudy {
    pub quantities: Vec<QuantityOrder>,
    /// Half-order of the measured moment: statistics are E sup_t |v|^(2k).
    pub k: usize,
}

impl OrderStudy {
    pub fn quantity(&self, name: &str) -> Option<&QuantityOrder> {
        self.quantities.iter().find(|q| q.name == name)
    }
}

/// E sup over knots of the Euclidean norm raised to 2k, with its standard
/// error across particles.
fn sup_moment(paths: &Array3<f64>, k_order: usize) -> (f64, f64) {
    let n = paths.len_of(Axis(0));
    let mut stats = Vec::with_capacity(n);
    for i in 0..n {
        let particle = paths.index_axis(Axis(0), i);
        let mut sup: f64 = 0.0;
        for row in particle.rows() {
            let norm2: f64 = row.iter().map(|v| v * v).sum();
            sup = sup.max(norm2);
        }
        stats.push(sup.powi(k_order as i32));
    }
    (mean(&stats), stderr_of_mean(&stats))
}

fn fit_or_degenerate(points: &[OrderPoint]) -> Option<LineFit> {
    if points.iter().any(|p| p.stat <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.eps.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.stat.ln()).collect();
    fit_line(&xs, &ys)
}

/// Runs the ladder. `eps_list` must hold at least four strictly decreasing
/// widths spanning a factor of ten, every one resolvable on the grid, with
/// every window starting at `t0` inside the horizon.
#[allow(clippy::too_many_arguments)]
pub fn order_study(
    model: &dyn Coefficients,
    grid: &TimeGrid,
    law: &ControlLaw,
    t0: f64,
    beta: &ControlLaw,
    eps_list: &[f64],
    k_order: usize,
    x0: &[f64],
    x0_spread: f64,
    n: usize,
    seed: u64,
) -> Result<OrderStudy> {
    if eps_list.len() < 4 {
        return Err(Error::Argument(format!(
            "an order fit needs at least 4 window widths, got {}",
            eps_list.len()
        )));
    }
    if !eps_list.windows(2).all(|w| w[0] > w[1]) || eps_list.iter().any(|e| *e <= 0.0) {
        return Err(Error::Argument(
            "window widths must be positive and strictly decreasing".into(),
        ));
    }
    let span = eps_list[0] / eps_list[eps_list.len() - 1];
    if span < 10.0 - 1e-12 {
        return Err(Error::Argument(format!(
            "window widths span a factor of {span:.2}, need at least 10"
        )));
    }
    if k_order == 0 {
        return Err(Error::Argument("moment order k must be positive".into()));
    }

    let mut tracks: Vec<(&'static str, Vec<OrderPoint>)> = vec![
        ("delta_x", Vec::new()),
        ("first_flow", Vec::new()),
        ("second_flow", Vec::new()),
        ("delta_x_minus_first", Vec::new()),
        ("remainder", Vec::new()),
    ];

    for &eps in eps_list {
        let spike = SpikeVariation {
            t0,
            eps,
            beta: beta.clone(),
        };
        let bundle: VariationBundle =
            build_bundle(model, grid, law, &spike, x0, x0_spread, n, seed)?;
        let dx = bundle.delta_x();
        let r1 = &dx - &bundle.flows.y;
        let r2 = &r1 - &bundle.flows.z;
        let arrays: [&Array3<f64>; 5] = [&dx, &bundle.flows.y, &bundle.flows.z, &r1, &r2];
        for (track, arr) in tracks.iter_mut().zip(arrays) {
            let (stat, stderr) = sup_moment(arr, k_order);
            track.1.push(OrderPoint { eps, stat, stderr });
        }
    }

    let quantities = tracks
        .into_iter()
        .map(|(name, points)| {
            let fit = fit_or_degenerate(&points);
            QuantityOrder { name, points, fit }
        })
        .collect();
    Ok(OrderStudy {
        quantities,
        k: k_order,
    })
}
