//! Finite-difference helpers for checking tape gradients. These only
//! evaluate forward values and never touch the backward pass.

/// Central difference `(f(h) − f(−h)) / 2h` of a scalar function of a
/// perturbation.
pub fn central_difference(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Floor on the denominator of [`relative_error`]. Below it the comparison is
/// effectively absolute, which keeps gradients that are zero up to
/// cancellation from producing meaningless ratios.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}
