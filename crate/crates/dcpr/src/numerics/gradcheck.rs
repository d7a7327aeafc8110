//! Finite-difference verification for gradients.
//!
//! Central differences at `f64`: perturbation error is O(h^2) and float
//! roundoff is O(eps/h), so h = 1e-5 keeps both far below the 1e-4
//! relative-error budget the library's gradient tests enforce.

use super::matrix::Matrix;

/// Floor for the relative-error denominator, so near-zero gradients are
/// compared absolutely at this scale rather than blowing up the ratio.
pub const REL_ERROR_GUARD: f64 = 1e-6;

/// Numerically estimate d f / d params with central differences.
///
/// `f` evaluates the scalar objective at the given parameter values; it is
/// called 2 x (total entries) times.
pub fn central_difference(
    mut f: impl FnMut(&[Matrix<f64>]) -> f64,
    params: &[Matrix<f64>],
    h: f64,
) -> Vec<Matrix<f64>> {
    let mut work: Vec<Matrix<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Matrix::zeros(params[p].rows(), params[p].cols());
        for idx in 0..params[p].data().len() {
            let orig = work[p].data()[idx];
            work[p].data_mut()[idx] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[idx] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[idx] = orig;
            g.data_mut()[idx] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between two gradients, with the denominator floored
/// at [`REL_ERROR_GUARD`].
pub fn max_rel_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_GUARD))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_recovers_quadratic_gradient() {
        // f = sum(x^2) => grad = 2x.
        let f = |ps: &[Matrix<f64>]| ps[0].data().iter().map(|v| v * v).sum();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let g = central_difference(f, &[x.clone()], 1e-5);
        let expect = x.scale(2.0);
        assert!(max_rel_error(&expect, &g[0]) < 1e-9);
    }

    #[test]
    fn rel_error_guard_handles_zero_gradients() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0]]);
        let b = Matrix::from_rows(&[vec![1e-9, 1.0]]);
        // |0 - 1e-9| / guard = 1e-3: small perturbations near zero do not
        // explode the ratio.
        assert!(max_rel_error(&a, &b) < 2e-3);
    }
}
