//! Central finite differences: the independent oracle for every gradient
//! claim in the crate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator. Below this magnitude the
/// comparison is effectively absolute, which keeps finite-difference noise on
/// near-zero gradients from registering as huge relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-2;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_coordinate: Vec<f64>,
    pub step: f64,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. `f` must be pure and deterministic.
pub fn finite_diff_gradient<F>(f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {}", step)));
    }
    let mut grad = vec![0.0; point.numel()];
    let mut work = point.clone();
    for i in 0..point.numel() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + step;
        let plus = f(&work)?;
        work.data_mut()[i] = orig - step;
        let minus = f(&work)?;
        work.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_gradient",
                detail: format!("function value at coordinate {}", i),
            });
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Compares `analytic` to the finite-difference gradient of `f` at `point`.
pub fn check_gradient<F>(f: F, point: &Tensor, analytic: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if analytic.shape() != point.shape() {
        return Err(Error::ShapeMismatch {
            op: "check_gradient",
            detail: format!("{:?} vs {:?}", analytic.shape(), point.shape()),
        });
    }
    let numeric = finite_diff_gradient(f, point, step)?;
    let per_coordinate: Vec<f64> = numeric
        .data()
        .iter()
        .zip(analytic.data())
        .map(|(&n, &a)| relative_error(n, a))
        .collect();
    let max_relative_error = per_coordinate.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { max_relative_error, per_coordinate, step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let f = |x: &Tensor| Ok(x.data()[0] * x.data()[0]);
        let p = Tensor::from_vec(vec![2.0]).unwrap();
        let g = finite_diff_gradient(f, &p, 1e-5).unwrap();
        assert!((g.data()[0] - 4.0).abs() <= 1e-8, "{}", g.data()[0]);
    }

    #[test]
    fn linear_function_gives_all_ones() {
        let f = |x: &Tensor| Ok(x.data().iter().sum());
        let p = Tensor::from_vec(vec![0.3, -1.7, 4.2]).unwrap();
        let g = finite_diff_gradient(f, &p, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let f = |x: &Tensor| Ok(x.data()[0]);
        let p = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(finite_diff_gradient(f, &p, 0.0).is_err());
        assert!(finite_diff_gradient(f, &p, -1e-5).is_err());
    }

    #[test]
    fn non_finite_function_value_is_reported() {
        let f_nan = |x: &Tensor| -> Result<f64> { Ok(x.data()[0] * f64::NAN) };
        let p = Tensor::from_vec(vec![3.0]).unwrap();
        assert!(finite_diff_gradient(f_nan, &p, 1e-5).is_err());
    }

    #[test]
    fn max_relative_error_is_non_negative_and_reported() {
        let f = |x: &Tensor| Ok(x.data().iter().map(|v| v * v).sum());
        let p = Tensor::from_vec(vec![1.0, -2.0]).unwrap();
        let analytic = Tensor::from_vec(vec![2.0, -4.0]).unwrap();
        let rep = check_gradient(f, &p, &analytic, 1e-5).unwrap();
        assert!(rep.max_relative_error >= 0.0);
        assert!(rep.max_relative_error < 1e-8);
        assert_eq!(rep.per_coordinate.len(), 2);
    }
}
