use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_TREES: usize = 200;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

/// Depth-one regression tree: `left` when `x[feature] <= threshold`, else `right`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stump<T> {
    pub feature: usize,
    pub threshold: T,
    pub left: T,
    pub right: T,
}

impl<T: Scalar> Stump<T> {
    pub fn predict(&self, x: &[T]) -> T {
        if x.get(self.feature).is_some_and(|&v| v <= self.threshold) {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StumpEnsemble<T> {
    pub base: T,
    pub learning_rate: T,
    pub stumps: Vec<Stump<T>>,
    /// Mean squared training error after 0, 1, ..., n_trees stumps.
    pub training_loss: Vec<T>,
}

impl<T: Scalar> StumpEnsemble<T> {
    pub fn predict(&self, x: &[T]) -> T {
        self.stumps
            .iter()
            .fold(self.base, |acc, s| acc + self.learning_rate * s.predict(x))
    }
}

fn mse<T: Scalar>(resid: &[T]) -> T {
    if resid.is_empty() {
        return T::zero();
    }
    resid.iter().map(|&r| r * r).sum::<T>() / T::of_usize(resid.len())
}

/// Squared-error gradient boosting with stumps, initialized at the target mean.
pub fn fit_boosted_stumps<T: Scalar>(
    features: &Matrix<T>,
    targets: &[T],
    n_trees: usize,
    learning_rate: T,
) -> StumpEnsemble<T> {
    let n = targets.len();
    assert_eq!(features.rows(), n);
    let base = crate::scalar::mean(targets);
    let mut resid: Vec<T> = targets.iter().map(|&y| y - base).collect();
    let orders: Vec<Vec<usize>> = (0..features.cols())
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| features[(a, f)].partial_cmp(&features[(b, f)]).unwrap());
            idx
        })
        .collect();
    let mut ensemble = StumpEnsemble {
        base,
        learning_rate,
        stumps: Vec::with_capacity(n_trees),
        training_loss: vec![mse(&resid)],
    };
    let two = T::of(2.0);
    for _ in 0..n_trees {
        let total: T = resid.iter().copied().sum();
        let nn = T::of_usize(n.max(1));
        let mut best: Option<(T, Stump<T>)> = None;
        for (f, order) in orders.iter().enumerate() {
            let mut left_sum = T::zero();
            for pos in 0..n.saturating_sub(1) {
                let i = order[pos];
                left_sum = left_sum + resid[i];
                let (xv, xnext) = (features[(i, f)], features[(order[pos + 1], f)]);
                if xv == xnext {
                    continue;
                }
                let nl = T::of_usize(pos + 1);
                let nr = nn - nl;
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
                if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                    best = Some((
                        gain,
                        Stump {
                            feature: f,
                            threshold: (xv + xnext) / two,
                            left: left_sum / nl,
                            right: right_sum / nr,
                        },
                    ));
                }
            }
        }
        let stump = match best {
            Some((_, s)) => s,
            None => {
                let m = total / nn;
                Stump {
                    feature: 0,
                    threshold: T::infinity(),
                    left: m,
                    right: m,
                }
            }
        };
        for (i, r) in resid.iter_mut().enumerate() {
            *r = *r - learning_rate * stump.predict(features.row(i));
        }
        ensemble.stumps.push(stump);
        ensemble.training_loss.push(mse(&resid));
    }
    ensemble
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tree_on_binary_feature() {
        let x = Matrix::from_fn(6, 1, |i, _| if i < 2 { 0.0 } else { 1.0 });
        let y = [1.0, 3.0, 5.0, 6.0, 7.0, 8.0];
        let lr = 0.5_f64;
        let model = fit_boosted_stumps(&x, &y, 1, lr);
        let ybar = 30.0 / 6.0;
        assert!((model.predict(&[0.0]) - (ybar + lr * (2.0 - ybar))).abs() < 1e-12);
        assert!((model.predict(&[1.0]) - (ybar + lr * (6.5 - ybar))).abs() < 1e-12);
    }

    #[test]
    fn step_target_is_learned() {
        let n = 50;
        let x = Matrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                i as f64 / n as f64
            } else {
                ((i * 7) % 5) as f64
            }
        });
        let y: Vec<f64> = (0..n).map(|i| if i < 20 { 1.0 } else { 4.0 }).collect();
        let model = fit_boosted_stumps(&x, &y, 50, 1.0);
        let var = mse(&y.iter().map(|v| v - crate::scalar::mean(&y)).collect::<Vec<_>>());
        assert!(*model.training_loss.last().unwrap() < 0.01 * var);
    }

    #[test]
    fn constant_target_has_zero_loss() {
        let x = Matrix::from_fn(8, 1, |i, _| i as f64);
        let model = fit_boosted_stumps(&x, &[2.5; 8], 10, 0.1);
        assert_eq!(model.predict(&[3.0]), 2.5);
        assert!(model.training_loss.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn training_loss_never_increases() {
        let n = 40;
        let x = Matrix::from_fn(n, 2, |i, j| ((i * (j + 3)) % 11) as f64);
        let y: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 - 0.3 * i as f64).collect();
        let model = fit_boosted_stumps(&x, &y, 100, 0.3);
        for w in model.training_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
