//! Central finite differences for gradient verification.
//!
//! The difference quotient uses the actually-applied f32 step on each
//! side (x+h and x-h round to storage precision; the denominator is their
//! exact f64 difference), so the check is limited by truncation error
//! rather than step rounding.

use crate::tensor::Tensor;

/// Gradient of `f` at `x` by central differences, one entry at a time.
pub fn fd_grad(x: &Tensor, h: f32, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = orig + h;
        let minus = orig - h;
        probe.data_mut()[i] = plus;
        let f_plus = f(&probe);
        probe.data_mut()[i] = minus;
        let f_minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (f_plus - f_minus) / (plus as f64 - minus as f64);
    }
    grad
}

/// Largest relative error between two gradient vectors, with denominator
/// `max(|a|, |b|, floor)` so that near-zero pairs do not blow up.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Like [`max_rel_error`] but skipping listed entries (used to exclude
/// clip-boundary entries from the clipped gram-anchoring check).
pub fn max_rel_error_excluding(a: &[f64], b: &[f64], floor: f64, exclude: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        if exclude.contains(&i) {
            continue;
        }
        let e = (a[i] - b[i]).abs() / a[i].abs().max(b[i].abs()).max(floor);
        worst = worst.max(e);
    }
    worst
}
