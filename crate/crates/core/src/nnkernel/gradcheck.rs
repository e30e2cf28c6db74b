//! Central finite differences for checking analytic gradients.

/// Denominator floor so that pairs of near-zero derivatives compare by
/// absolute difference instead of amplifying round-off. At `ε = 1e-5` a
/// loss of magnitude ~10² carries ~1e-9 of differencing noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `(f(x + ε·e_i) − f(x − ε·e_i)) / 2ε` for every coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}
