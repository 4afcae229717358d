//! Numerical differentiation helpers used to verify analytic gradients.
//!
//! These are deliberately independent of the tape: they only evaluate a
//! black-box scalar function at perturbed inputs, so agreement with
//! [`crate::grad::Tape::backward`] is evidence rather than tautology.

/// Central-difference gradient of `f` at `x`: each coordinate is perturbed by
/// `eps` in both directions while the rest stay fixed.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Relative error with an absolute floor of 1, so tiny gradients are compared
/// absolutely instead of amplifying round-off.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Largest elementwise [`rel_err`] between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_on_quadratic_is_exact_to_roundoff() {
        // f(x) = sum(x^2), df/dx_i = 2 x_i, and central differences are exact
        // for quadratics up to floating point noise.
        let x = vec![1.0, -2.0, 0.5];
        let g = central_diff(&mut |v| v.iter().map(|a| a * a).sum(), &x, 1e-4);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&g, &expect) < 1e-9);
    }

    #[test]
    fn rel_err_uses_absolute_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-8, 0.0) - 1e-8).abs() < 1e-20);
        assert!((rel_err(200.0, 100.0) - 0.5).abs() < 1e-12);
    }
}
