use crate::linalg::{cholesky, cholesky_solve, dot, lu_solve, Matrix};
use crate::scalar::Scalar;

pub const MAX_NEWTON_ITER: usize = 50;
/// Tolerance on the Euclidean norm of the mean score vector.
pub const GRADIENT_TOL: f64 = 1e-10;
/// Linear predictors beyond this are treated as diverging coefficients.
const SATURATED_LOGIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit<T> {
    pub coefficients: Vec<T>,
    pub iterations: usize,
    /// `false` when the iteration cap was hit, typically under perfect separation.
    pub converged: bool,
}

pub fn expit<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

fn log_likelihood<T: Scalar>(eta: &[T], y: &[T]) -> T {
    // y·η − log(1 + e^η), written to stay finite for large |η|
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| {
            let softplus = if e > T::zero() {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            yi * e - softplus
        })
        .sum()
}

/// Newton–Raphson logistic regression of `targets ∈ [0, 1]` on `features`,
/// with an optional per-row `offset` on the linear predictor. Fractional
/// targets are accepted (quasi-binomial score).
pub fn fit_logistic<T: Scalar>(features: &Matrix<T>, targets: &[T], offset: Option<&[T]>) -> LogisticFit<T> {
    let n = features.rows();
    let p = features.cols();
    assert_eq!(n, targets.len());
    let zero_offset = vec![T::zero(); n];
    let offset = offset.unwrap_or(&zero_offset);
    let mut beta = vec![T::zero(); p];
    let linear = |beta: &[T]| -> Vec<T> { (0..n).map(|i| offset[i] + dot(features.row(i), beta)).collect() };
    let mut eta = linear(&beta);
    let mut ll = log_likelihood(&eta, targets);
    let tol = T::of(GRADIENT_TOL);
    let nn = T::of_usize(n.max(1));
    for iter in 0..=MAX_NEWTON_ITER {
        let probs: Vec<T> = eta.iter().map(|&e| expit(e)).collect();
        let resid: Vec<T> = targets.iter().zip(&probs).map(|(&y, &q)| y - q).collect();
        let grad = features.t_mul_vec(&resid);
        let gnorm = dot(&grad, &grad).sqrt() / nn;
        if gnorm <= tol {
            // a vanishing score with saturated fits is the signature of separation
            let separated = eta.iter().any(|e| e.abs() > T::of(SATURATED_LOGIT));
            return LogisticFit {
                coefficients: beta,
                iterations: iter,
                converged: !separated,
            };
        }
        if iter == MAX_NEWTON_ITER {
            break;
        }
        let mut hess = Matrix::zeros(p, p);
        for i in 0..n {
            let w = probs[i] * (T::one() - probs[i]);
            let row = features.row(i);
            for a in 0..p {
                for b in 0..p {
                    hess[(a, b)] = hess[(a, b)] + w * row[a] * row[b];
                }
            }
        }
        let step = match cholesky(&hess) {
            Some(l) => cholesky_solve(&l, &grad),
            None => {
                let mut h = hess.clone();
                h.add_ridge(T::of(1e-10) * (hess.trace() + T::one()));
                match lu_solve(&h, &grad) {
                    Some(s) => s,
                    None => break,
                }
            }
        };
        // step halving on the log-likelihood
        let mut scale = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<T> = beta.iter().zip(&step).map(|(&b, &s)| b + scale * s).collect();
            let cand_eta = linear(&cand);
            let cand_ll = log_likelihood(&cand_eta, targets);
            if cand_ll >= ll || !ll.is_finite() {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale = scale * T::of(0.5);
        }
        if !accepted {
            break;
        }
    }
    LogisticFit {
        coefficients: beta,
        iterations: MAX_NEWTON_ITER,
        converged: false,
    }
}

/// Multinomial logistic (softmax) regression with the first class as reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxFit<T> {
    /// `(n_classes - 1)` coefficient rows of length `p`.
    pub coefficients: Vec<Vec<T>>,
    pub n_classes: usize,
    pub converged: bool,
}

impl<T: Scalar> SoftmaxFit<T> {
    pub fn probabilities(&self, features: &[T]) -> Vec<T> {
        let mut logits = vec![T::zero()];
        logits.extend(self.coefficients.iter().map(|b| dot(b, features)));
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// Newton fit of the pooled softmax likelihood. `classes[i] ∈ 0..n_classes`.
pub fn fit_softmax<T: Scalar>(features: &Matrix<T>, classes: &[usize], n_classes: usize) -> SoftmaxFit<T> {
    let n = features.rows();
    let p = features.cols();
    let m = n_classes.saturating_sub(1);
    let dim = m * p;
    let mut fit = SoftmaxFit {
        coefficients: vec![vec![T::zero(); p]; m],
        n_classes,
        converged: m == 0,
    };
    if m == 0 {
        return fit;
    }
    let nn = T::of_usize(n.max(1));
    let loglik = |fit: &SoftmaxFit<T>| -> T {
        (0..n)
            .map(|i| {
                fit.probabilities(features.row(i))[classes[i]]
                    .max(T::min_positive_value())
                    .ln()
            })
            .sum()
    };
    let mut ll = loglik(&fit);
    for _ in 0..MAX_NEWTON_ITER {
        let mut grad = vec![T::zero(); dim];
        let mut hess = Matrix::zeros(dim, dim);
        for i in 0..n {
            let x = features.row(i);
            let pr = fit.probabilities(x);
            for c in 0..m {
                let ind = if classes[i] == c + 1 { T::one() } else { T::zero() };
                let r = ind - pr[c + 1];
                for a in 0..p {
                    grad[c * p + a] = grad[c * p + a] + r * x[a];
                }
                for c2 in 0..m {
                    let delta = if c == c2 { T::one() } else { T::zero() };
                    let w = pr[c + 1] * (delta - pr[c2 + 1]);
                    for a in 0..p {
                        for b in 0..p {
                            let idx = (c * p + a, c2 * p + b);
                            hess[idx] = hess[idx] + w * x[a] * x[b];
                        }
                    }
                }
            }
        }
        if dot(&grad, &grad).sqrt() / nn <= T::of(GRADIENT_TOL) {
            fit.converged = true;
            return fit;
        }
        let step = match cholesky(&hess) {
            Some(l) => cholesky_solve(&l, &grad),
            None => {
                hess.add_ridge(T::of(1e-10) * (hess.trace() + T::one()));
                match lu_solve(&hess, &grad) {
                    Some(s) => s,
                    None => return fit,
                }
            }
        };
        let mut scale = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = fit.clone();
            for c in 0..m {
                for a in 0..p {
                    cand.coefficients[c][a] = cand.coefficients[c][a] + scale * step[c * p + a];
                }
            }
            let cand_ll = loglik(&cand);
            if cand_ll >= ll {
                fit = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale = scale * T::of(0.5);
        }
        if !accepted {
            return fit;
        }
    }
    fit
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_only(n: usize) -> Matrix<f64> {
        Matrix::from_fn(n, 1, |_, _| 1.0)
    }

    #[test]
    fn balanced_targets_give_zero_intercept() {
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let fit = fit_logistic(&intercept_only(6), &y, None);
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-8);
    }

    #[test]
    fn two_by_two_table_log_odds_ratio() {
        // group 0: 3 successes / 10, group 1: 7 successes / 10
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (g, succ) in [(0.0, 3), (1.0, 7)] {
            for i in 0..10 {
                rows.push(vec![1.0, g]);
                y.push(if i < succ { 1.0 } else { 0.0 });
            }
        }
        let fit = fit_logistic(&Matrix::from_rows(&rows), &y, None);
        let odds = |p: f64| p / (1.0 - p);
        let lor = (odds(0.7) / odds(0.3)).ln();
        assert!((fit.coefficients[0] - odds(0.3).ln()).abs() < 1e-8);
        assert!((fit.coefficients[1] - lor).abs() < 1e-8);
    }

    #[test]
    fn offset_at_true_logit_gives_zero_fluctuation() {
        let probs = [0.2, 0.4, 0.6, 0.9];
        let h: Vec<Vec<f64>> = vec![vec![1.5], vec![0.5], vec![2.0], vec![1.0]];
        let offset: Vec<f64> = probs.iter().map(|&p| logit(p)).collect();
        let fit = fit_logistic(&Matrix::from_rows(&h), &probs, Some(&offset));
        assert!(fit.coefficients[0].abs() < 1e-8);
    }

    #[test]
    fn separation_is_flagged() {
        let x = Matrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -2.0], vec![1.0, 1.0], vec![1.0, 2.0]]);
        let fit = fit_logistic(&x, &[0.0, 0.0, 1.0, 1.0], None);
        assert!(!fit.converged);
    }

    #[test]
    fn softmax_recovers_class_frequencies() {
        let classes = [0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2];
        let fit = fit_softmax(&intercept_only(12), &classes, 3);
        assert!(fit.converged);
        let p = fit.probabilities(&[1.0]);
        for (got, want) in p.iter().zip([2.0 / 12.0, 4.0 / 12.0, 6.0 / 12.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
