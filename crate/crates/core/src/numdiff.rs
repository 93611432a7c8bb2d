//! Central finite differences.
//!
//! Used as the independent oracle for every gradient and Jacobian check in the
//! test suites; deliberately knows nothing about the tape.

/// Central difference d/dx_i of `f` at `x`, one component.
pub fn central_diff<F>(f: &F, x: &[f64], i: usize, step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += step;
    minus[i] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Full finite-difference gradient of a scalar function.
pub fn gradient<F>(f: &F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    (0..x.len()).map(|i| central_diff(f, x, i, step)).collect()
}

/// Finite-difference Jacobian of a vector function (rows index outputs).
pub fn jacobian<F>(f: &F, x: &[f64], step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let m = f(x).len();
    let mut jac = vec![vec![0.0; n]; m];
    for j in 0..n {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[j] += step;
        minus[j] -= step;
        let fp = f(&plus);
        let fm = f(&minus);
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}

/// Relative error between two gradient vectors:
/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
