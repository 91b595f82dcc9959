//! Finite-difference utilities for checking reverse-mode gradients.
//!
//! These only ever evaluate the function being checked, so they stay
//! independent of the tape's reverse rules.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`.
///
/// `floor` keeps the ratio meaningful when the reference is (close to) zero.
pub fn relative_l2_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_l2_error: length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = central_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_with_floor() {
        assert_eq!(relative_l2_error(&[1.0], &[1.0], 1e-12), 0.0);
        assert!((relative_l2_error(&[1e-9], &[0.0], 1.0) - 1e-9).abs() < 1e-20);
    }
}
