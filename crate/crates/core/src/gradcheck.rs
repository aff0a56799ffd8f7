//! Central finite-difference utilities used by the gradient-oracle tests.
//!
//! Comparisons are relative: |a - n| / max(|a|, |n|), with pairs below a
//! small absolute floor treated as matching zeros (finite differences lose
//! all significant digits there).

/// Central finite differences of `f` w.r.t. every entry of `x`.
///
/// `x` is perturbed in place and restored; `f` must be a pure function of it.
pub fn central_diff(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let h = eps * orig.abs().max(1.0);
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error between two values, with an absolute floor under which
/// both are considered zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Worst relative error over two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
