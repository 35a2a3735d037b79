//! Central-difference gradient checking.
//!
//! Used by unit tests and the acceptance suite to compare analytic gradients
//! against an independent numeric estimate. The numeric side only ever calls
//! the forward pass, so it stays independent of the backward implementation.

/// Central difference `(f(+h) - f(-h)) / 2h` of a scalar function of one
/// perturbed coordinate.
pub fn central_difference(mut eval: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (eval(h) - eval(-h)) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Checks `analytic[i] ~= d f / d theta_i` for a set of coordinates.
///
/// `eval(i, delta)` must recompute the scalar objective with coordinate `i`
/// shifted by `delta`. Returns the worst relative error observed.
pub fn check_coords(
    coords: &[usize],
    analytic: &[f64],
    mut eval: impl FnMut(usize, f64) -> f64,
    h: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (slot, &i) in coords.iter().enumerate() {
        let numeric = central_difference(|d| eval(i, d), h);
        worst = worst.max(rel_err(analytic[slot], numeric));
    }
    worst
}
