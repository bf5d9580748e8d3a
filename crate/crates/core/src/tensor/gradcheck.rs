//! Central finite differences, used to check analytic gradients.
//!
//! Nothing here touches the tape: the closure under test is evaluated on
//! perturbed copies of the input and the slopes are read off directly.

use crate::tensor::Matrix;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// `∂f/∂x` estimated entrywise as `(f(x + h·e) − f(x − h·e)) / 2h`.
pub fn numeric_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        grad.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, falling back to the absolute difference when
/// both gradients are numerically zero.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let norm = |m: &Matrix| m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}
