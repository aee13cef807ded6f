//! Fixed-step RK4 integrator for the small ODE systems used as references
//! (Riccati flows, moment ODEs, linear backward equations).

/// Integrate `dy/dt = f(t, y)` from `t0` to `t1` with `steps` RK4 steps.
/// Works forwards or backwards in time depending on the sign of `t1 - t0`.
pub fn rk4<F>(f: F, t0: f64, t1: f64, y0: &[f64], steps: usize) -> Vec<f64>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    assert!(steps > 0, "rk4 needs at least one step");
    let h = (t1 - t0) / steps as f64;
    let mut t = t0;
    let mut y = y0.to_vec();
    let n = y.len();
    for _ in 0..steps {
        let k1 = f(t, &y);
        let y2: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
        let k2 = f(t + 0.5 * h, &y2);
        let y3: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
        let k3 = f(t + 0.5 * h, &y3);
        let y4: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
        let k4 = f(t + h, &y4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
    }
    y
}

/// Sample the RK4 solution at `knots` (must be monotone, starting at the
/// initial time). Returns one state vector per knot.
pub fn rk4_at_knots<F>(f: F, knots: &[f64], y0: &[f64], substeps: usize) -> Vec<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Copy,
{
    assert!(!knots.is_empty());
    let mut out = Vec::with_capacity(knots.len());
    let mut y = y0.to_vec();
    out.push(y.clone());
    for w in knots.windows(2) {
        y = rk4(f, w[0], w[1], &y, substeps);
        out.push(y.clone());
    }
    out
}
