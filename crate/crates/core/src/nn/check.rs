//! Central finite-difference utilities for gradient verification.

use ndarray::ArrayD;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
///
/// `f` is evaluated with perturbed copies of the inputs; the step is
/// relative to each coordinate's magnitude.
pub fn central_diff_grad(
    f: impl Fn(&[ArrayD<f64>]) -> f64,
    inputs: &[ArrayD<f64>],
    which: usize,
    base_step: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(inputs[which].raw_dim());
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let n = inputs[which].len();
    for flat in 0..n {
        let orig = inputs[which].as_slice().unwrap()[flat];
        let h = base_step * orig.abs().max(1.0);
        work[which].as_slice_mut().unwrap()[flat] = orig + h;
        let fp = f(&work);
        work[which].as_slice_mut().unwrap()[flat] = orig - h;
        let fm = f(&work);
        work[which].as_slice_mut().unwrap()[flat] = orig;
        grad.as_slice_mut().unwrap()[flat] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central-difference gradient on a sampled subset of coordinates; entries
/// not in `coords` are left as NaN so they cannot be compared accidentally.
pub fn central_diff_grad_sampled(
    f: impl Fn(&[ArrayD<f64>]) -> f64,
    inputs: &[ArrayD<f64>],
    which: usize,
    base_step: f64,
    coords: &[usize],
) -> ArrayD<f64> {
    let mut grad = ArrayD::from_elem(inputs[which].raw_dim(), f64::NAN);
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for &flat in coords {
        let orig = inputs[which].as_slice().unwrap()[flat];
        let h = base_step * orig.abs().max(1.0);
        work[which].as_slice_mut().unwrap()[flat] = orig + h;
        let fp = f(&work);
        work[which].as_slice_mut().unwrap()[flat] = orig - h;
        let fm = f(&work);
        work[which].as_slice_mut().unwrap()[flat] = orig;
        grad.as_slice_mut().unwrap()[flat] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradient coordinates with an absolute floor:
/// tiny gradients are compared absolutely so finite-difference noise on
/// near-zero entries does not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Maximum [`rel_err`] over all pairs, skipping NaN entries of `numeric`
/// (unsampled coordinates).
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .filter(|(_, n)| !n.is_nan())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
