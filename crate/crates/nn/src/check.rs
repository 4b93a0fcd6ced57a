//! Central finite differences, the independent oracle for every custom
//! differentiable op in this workspace.

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so near-zero entries do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
