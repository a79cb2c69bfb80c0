//! Central finite differences, the reference every backward pass is checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Estimate `∂f/∂θ` coordinate by coordinate with `(f(θ+h) − f(θ−h)) / 2h`.
///
/// `f` receives the full perturbed parameter list on every call.
pub fn finite_difference_gradient<F>(mut f: F, params: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step {step} must be positive")));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut grads: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite evaluation at parameter {p}, coordinate {i}"
                )));
            }
            grads[p].data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Largest coordinate difference, relative to the largest reference magnitude.
///
/// Returns the absolute difference when the reference is identically zero.
pub fn max_relative_error(actual: &[Tensor<f64>], reference: &[Tensor<f64>]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "gradient lists differ in length");
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for (a, r) in actual.iter().zip(reference) {
        assert_eq!(a.shape(), r.shape(), "gradient shapes differ");
        for (&x, &y) in a.data().iter().zip(r.data()) {
            max_diff = max_diff.max((x - y).abs());
            max_ref = max_ref.max(y.abs());
        }
    }
    if max_ref == 0.0 {
        max_diff
    } else {
        max_diff / max_ref
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|p| Ok(p[0].item().powi(2)), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_gradient(|_| Ok(4.2), &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!(g[0].item().abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(finite_difference_gradient(|_| Ok(0.0), &[Tensor::scalar(1.0)], 0.0).is_err());
        let err = finite_difference_gradient(|_| Ok(f64::NAN), &[Tensor::scalar(1.0)], 1e-3);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}
