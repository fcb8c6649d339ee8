use crate::linalg::{cholesky, cholesky_solve, condition_number, Matrix};
use crate::scalar::Scalar;

/// Gram matrices with a spectral condition number above this are ridged.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit<T> {
    pub coefficients: Vec<T>,
    /// Ridge penalty added to the Gram diagonal, zero when none was needed.
    pub ridge: T,
}

/// Least squares via the normal equations. An ill-conditioned Gram matrix is
/// regularized with `λ = 1e-8 · trace / p`. `None` only when even the ridged
/// system cannot be factorized.
pub fn fit_linear_ls<T: Scalar>(features: &Matrix<T>, targets: &[T]) -> Option<LinearFit<T>> {
    assert_eq!(features.rows(), targets.len());
    if features.rows() == 0 {
        return None;
    }
    let p = features.cols();
    let mut gram = features.gram();
    let rhs = features.t_mul_vec(targets);
    let mut ridge = T::zero();
    let cond = condition_number(&gram);
    if !(cond <= T::of(MAX_CONDITION)) {
        ridge = T::of(1e-8) * gram.trace() / T::of_usize(p);
        gram.add_ridge(ridge);
    }
    let l = cholesky(&gram)?;
    let coefficients = cholesky_solve(&l, &rhs);
    coefficients
        .iter()
        .all(|c| c.is_finite())
        .then_some(LinearFit { coefficients, ridge })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(xs: &[f64]) -> Matrix<f64> {
        Matrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i] })
    }

    #[test]
    fn exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x).collect();
        let fit = fit_linear_ls(&design(&xs), &ys).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-10);
        assert_eq!(fit.ridge, 0.0);
    }

    #[test]
    fn constant_targets() {
        let xs = [0.3, -1.0, 2.5, 4.0];
        let fit = fit_linear_ls(&design(&xs), &[1.5; 4]).unwrap();
        assert!((fit.coefficients[0] - 1.5).abs() < 1e-12);
        assert!(fit.coefficients[1].abs() < 1e-12);
    }

    #[test]
    fn collinear_columns_trigger_ridge() {
        let x = Matrix::from_fn(6, 3, |i, j| match j {
            0 => 1.0,
            _ => i as f64,
        });
        let ys: Vec<f64> = (0..6).map(|i| 1.0 + i as f64).collect();
        let fit = fit_linear_ls(&x, &ys).unwrap();
        assert!(fit.ridge > 0.0);
        let pred: Vec<f64> = x.matvec(&fit.coefficients);
        for (p, y) in pred.iter().zip(&ys) {
            assert!((p - y).abs() < 1e-5);
        }
    }
}
