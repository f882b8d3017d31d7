//! Central finite-difference gradient oracle.
//!
//! This is the reference all gradient acceptance tests compare against:
//! central differences with step `1e-6` on 64-bit floats, independent of
//! the tape's backward pass (it only re-runs forward evaluations).

pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`, one forward pair per component.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Central-difference gradient for a selected subset of components; entries
/// not listed stay zero. Used to spot-check large parameter vectors.
pub fn fd_gradient_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
    indices: &[usize],
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for &i in indices {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Relative error between two gradient vectors: `max|a-b| / max(max|b|, floor)`.
///
/// The floor keeps the metric meaningful when the true gradient is ~0.
pub fn relative_error(got: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(got.len(), reference.len());
    let max_diff = got
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let max_ref = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    max_diff / max_ref.max(1e-8)
}

/// Relative error restricted to the given component indices.
pub fn relative_error_at(got: &[f64], reference: &[f64], indices: &[usize]) -> f64 {
    let max_diff = indices
        .iter()
        .map(|&i| (got[i] - reference[i]).abs())
        .fold(0.0, f64::max);
    let max_ref = indices
        .iter()
        .map(|&i| reference[i].abs())
        .fold(0.0, f64::max);
    max_diff / max_ref.max(1e-8)
}
