//! Doubly robust (AIPW) scores, building-block estimators and their
//! estimated influence functions.

use crate::error::{Result, TateError};
use crate::model::{Dataset, Observation, TreatmentId, TrialId};
use crate::nuisance::Nuisance;
use crate::scalar::{mean, Scalar};

/// A scalar estimate with one influence-function value per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateWithIF<T> {
    pub value: T,
    pub if_values: Vec<T>,
    pub n: usize,
}

impl<T: Scalar> EstimateWithIF<T> {
    /// Estimate given by the sample mean of per-observation scores.
    pub fn from_scores(scores: &[T]) -> Self {
        let value = mean(scores);
        Self::centered_at(scores, value)
    }

    /// Influence values `score − value·w`, where `w = 1[S=k]/π̂` normalized
    /// to sample mean one: the influence function when trial membership
    /// probabilities are estimated rather than known.
    pub fn membership_adjusted(scores: &[T], membership_weights: &[T], value: T) -> Self {
        Self {
            value,
            if_values: scores
                .iter()
                .zip(membership_weights)
                .map(|(&s, &w)| s - value * w)
                .collect(),
            n: scores.len(),
        }
    }

    /// Influence values `score − value` around an externally chosen value.
    pub fn centered_at(scores: &[T], value: T) -> Self {
        Self {
            value,
            if_values: scores.iter().map(|&s| s - value).collect(),
            n: scores.len(),
        }
    }

    pub fn variance(&self) -> T {
        if_variance(self).0
    }

    pub fn std_error(&self) -> T {
        if_variance(self).1
    }
}

/// How a marginal mean is formed from the fitted nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanEstimator {
    /// Sample mean of the doubly robust score.
    #[default]
    DoublyRobust,
    /// `P_n[1[S=k]/π̂ · μ̂]` without the residual correction. Influence
    /// values are still the doubly robust scores, centered at this value.
    PlugIn,
}

/// Which influence function accompanies a marginal mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InfluenceForm {
    /// Accounts for `π̂` being estimated: `1[S=k]/π̂·(inner − μ̄)`. Drops the
    /// trial-membership variance that a fixed-size or proportion-estimated
    /// design does not have.
    #[default]
    EstimatedMembership,
    /// `score − μ̄`, treating `π` as known.
    KnownMembership,
}

/// Doubly robust score of `obs` (the `i`-th observation) for the mean of
/// arm `a` in trial `k`; exactly zero off trial `k`.
pub fn dr_score_mean<T: Scalar, N: Nuisance<T>>(
    i: usize,
    obs: &Observation<T>,
    nuisance: &N,
    a: TreatmentId,
    k: TrialId,
) -> T {
    if obs.s != k {
        return T::zero();
    }
    let mu = nuisance.mu(i, obs, a, k);
    let pi = nuisance.pi(i, obs, k);
    let correction = if obs.a == a {
        (obs.y - mu) / nuisance.e(i, obs, k, a)
    } else {
        T::zero()
    };
    (correction + mu) / pi
}

fn plug_in_term<T: Scalar, N: Nuisance<T>>(
    i: usize,
    obs: &Observation<T>,
    nuisance: &N,
    a: TreatmentId,
    k: TrialId,
) -> T {
    if obs.s != k {
        return T::zero();
    }
    nuisance.mu(i, obs, a, k) / nuisance.pi(i, obs, k)
}

pub fn dr_scores<T: Scalar, N: Nuisance<T>>(dataset: &Dataset<T>, nuisance: &N, a: TreatmentId, k: TrialId) -> Vec<T> {
    dataset
        .observations
        .iter()
        .enumerate()
        .map(|(i, o)| dr_score_mean(i, o, nuisance, a, k))
        .collect()
}

/// `1[S=k]/π̂` over all observations, scaled to sample mean one.
pub fn membership_weights<T: Scalar, N: Nuisance<T>>(dataset: &Dataset<T>, nuisance: &N, k: TrialId) -> Vec<T> {
    let raw: Vec<T> = dataset
        .observations
        .iter()
        .enumerate()
        .map(|(i, o)| {
            if o.s == k {
                T::one() / nuisance.pi(i, o, k)
            } else {
                T::zero()
            }
        })
        .collect();
    let m = mean(&raw);
    if m > T::zero() {
        raw.into_iter().map(|w| w / m).collect()
    } else {
        raw
    }
}

fn check_cell<T: Scalar>(dataset: &Dataset<T>, a: TreatmentId, k: TrialId) -> Result<()> {
    if dataset.observations.iter().any(|o| o.s == k && o.a == a) {
        Ok(())
    } else {
        Err(TateError::EmptyCell { trial: k, arm: a })
    }
}

/// `μ̄̂_{a,k}`: mean over all `n` observations of the doubly robust score.
pub fn estimate_marginal_mean<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    a: TreatmentId,
    k: TrialId,
) -> Result<EstimateWithIF<T>> {
    estimate_marginal_mean_with(
        dataset,
        nuisance,
        a,
        k,
        MeanEstimator::DoublyRobust,
        InfluenceForm::default(),
    )
}

pub fn estimate_marginal_mean_with<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    a: TreatmentId,
    k: TrialId,
    estimator: MeanEstimator,
    form: InfluenceForm,
) -> Result<EstimateWithIF<T>> {
    check_cell(dataset, a, k)?;
    let scores = dr_scores(dataset, nuisance, a, k);
    let value = match estimator {
        MeanEstimator::DoublyRobust => mean(&scores),
        MeanEstimator::PlugIn => {
            let terms: Vec<T> = dataset
                .observations
                .iter()
                .enumerate()
                .map(|(i, o)| plug_in_term(i, o, nuisance, a, k))
                .collect();
            mean(&terms)
        }
    };
    Ok(match form {
        InfluenceForm::KnownMembership => EstimateWithIF::centered_at(&scores, value),
        InfluenceForm::EstimatedMembership => {
            EstimateWithIF::membership_adjusted(&scores, &membership_weights(dataset, nuisance, k), value)
        }
    })
}

/// Difference of two estimates with the elementwise difference of their influence values.
pub fn difference<T: Scalar>(lhs: &EstimateWithIF<T>, rhs: &EstimateWithIF<T>) -> EstimateWithIF<T> {
    EstimateWithIF {
        value: lhs.value - rhs.value,
        if_values: lhs.if_values.iter().zip(&rhs.if_values).map(|(&a, &b)| a - b).collect(),
        n: lhs.n,
    }
}

/// `τ̂_k = μ̄̂_{a_k,k} − μ̄̂_{b_k,k}`.
pub fn estimate_ate<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    k: TrialId,
) -> Result<EstimateWithIF<T>> {
    estimate_ate_with(
        dataset,
        nuisance,
        k,
        MeanEstimator::DoublyRobust,
        InfluenceForm::default(),
    )
}

pub fn estimate_ate_with<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    k: TrialId,
    estimator: MeanEstimator,
    form: InfluenceForm,
) -> Result<EstimateWithIF<T>> {
    let spec = dataset
        .trial(k)
        .ok_or_else(|| TateError::InvalidQuery(vec![format!("unknown trial {k}")]))?;
    let treated = estimate_marginal_mean_with(dataset, nuisance, spec.arm_a, k, estimator, form)?;
    let baseline = estimate_marginal_mean_with(dataset, nuisance, spec.arm_b, k, estimator, form)?;
    Ok(difference(&treated, &baseline))
}

/// `(P_n[IF²], sqrt(P_n[IF²] / n))`.
pub fn if_variance<T: Scalar>(est: &EstimateWithIF<T>) -> (T, T) {
    if est.if_values.is_empty() {
        return (T::zero(), T::zero());
    }
    let v = est.if_values.iter().map(|&f| f * f).sum::<T>() / T::of_usize(est.if_values.len());
    (v, (v / T::of_usize(est.n.max(1))).sqrt())
}

/// Central finite-difference derivative of the mean score along a nuisance path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathwiseDerivative<T> {
    pub derivative: T,
    /// Sampling standard error of the derivative (SD of per-observation derivatives / √n).
    pub std_error: T,
}

/// `d/dr P_n[φ_{a,k}(O; η_r)]` at `r = 0`, where `path(r)` returns the
/// perturbed nuisance `η_r`.
pub fn mean_score_derivative<T, N, F>(
    dataset: &Dataset<T>,
    a: TreatmentId,
    k: TrialId,
    step: T,
    path: F,
) -> PathwiseDerivative<T>
where
    T: Scalar,
    N: Nuisance<T>,
    F: Fn(T) -> N,
{
    let up = dr_scores(dataset, &path(step), a, k);
    let down = dr_scores(dataset, &path(-step), a, k);
    let two_h = step + step;
    let per_obs: Vec<T> = up.iter().zip(&down).map(|(&u, &d)| (u - d) / two_h).collect();
    let derivative = mean(&per_obs);
    let n = T::of_usize(per_obs.len());
    let var = per_obs.iter().map(|&d| (d - derivative) * (d - derivative)).sum::<T>() / (n - T::one());
    PathwiseDerivative {
        derivative,
        std_error: (var / n).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrialSpec;

    struct Fixed {
        pi: f64,
        e: f64,
        mu: f64,
    }

    impl Nuisance<f64> for Fixed {
        fn pi(&self, _: usize, _: &Observation<f64>, _: TrialId) -> f64 {
            self.pi
        }
        fn e(&self, _: usize, _: &Observation<f64>, _: TrialId, _: TreatmentId) -> f64 {
            self.e
        }
        fn mu(&self, _: usize, _: &Observation<f64>, _: TreatmentId, _: TrialId) -> f64 {
            self.mu
        }
    }

    fn obs(y: f64, a: u32, s: u32) -> Observation<f64> {
        Observation {
            y,
            a: TreatmentId(a),
            s: TrialId(s),
            x: vec![],
        }
    }

    fn toy(ys: &[(f64, u32)]) -> Dataset<f64> {
        let spec = TrialSpec {
            trial_id: TrialId(1),
            arm_a: TreatmentId(1),
            arm_b: TreatmentId(0),
            t0: 0,
            t1: 0,
            p_arm_a: 0.5,
        };
        Dataset::new(vec![spec], ys.iter().map(|&(y, a)| obs(y, a, 1)).collect(), 0)
    }

    #[test]
    fn score_hand_evaluations() {
        let nu = Fixed {
            pi: 0.5,
            e: 0.5,
            mu: 2.0,
        };
        let (a, k) = (TreatmentId(1), TrialId(1));
        assert_eq!(dr_score_mean(0, &obs(3.0, 1, 2), &nu, a, k), 0.0);
        assert_eq!(dr_score_mean(0, &obs(3.0, 1, 1), &nu, a, k), 8.0);
        assert_eq!(dr_score_mean(0, &obs(3.0, 0, 1), &nu, a, k), 4.0);
    }

    #[test]
    fn constant_scores_have_zero_influence() {
        let ds = toy(&[(5.0, 0), (5.0, 0), (1.0, 1)]);
        let nu = Fixed {
            pi: 1.0,
            e: 0.5,
            mu: 5.0,
        };
        let est = estimate_marginal_mean(&ds, &nu, TreatmentId(0), TrialId(1)).unwrap();
        assert_eq!(est.value, 5.0);
        assert!(est.if_values.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn degenerate_nuisance_reduces_to_sample_mean() {
        let ds = toy(&[(1.0, 1), (3.0, 1)]);
        let nu = Fixed {
            pi: 1.0,
            e: 1.0,
            mu: 0.0,
        };
        let est = estimate_marginal_mean(&ds, &nu, TreatmentId(1), TrialId(1)).unwrap();
        assert_eq!(est.value, 2.0);
    }

    #[test]
    fn empty_cell_is_an_error() {
        let ds = toy(&[(1.0, 1), (3.0, 1)]);
        let nu = Fixed {
            pi: 1.0,
            e: 1.0,
            mu: 0.0,
        };
        let err = estimate_marginal_mean(&ds, &nu, TreatmentId(0), TrialId(1)).unwrap_err();
        assert!(matches!(err, TateError::EmptyCell { .. }));
    }

    #[test]
    fn ate_of_identical_streams_is_zero() {
        let ds = toy(&[(2.0, 1), (2.0, 0)]);
        let nu = Fixed {
            pi: 1.0,
            e: 0.5,
            mu: 2.0,
        };
        let est = estimate_ate(&ds, &nu, TrialId(1)).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn variance_hand_values() {
        let zero = EstimateWithIF {
            value: 0.0,
            if_values: vec![0.0; 4],
            n: 4,
        };
        assert_eq!(if_variance(&zero), (0.0, 0.0));
        let pm = EstimateWithIF {
            value: 0.0,
            if_values: vec![1.0, -1.0],
            n: 2,
        };
        let (v, se) = if_variance(&pm);
        assert_eq!(v, 1.0);
        assert!((se - 0.5_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn influence_values_are_self_centered() {
        let ds = toy(&[(1.3, 1), (2.9, 0), (-0.4, 1), (7.1, 0), (3.3, 1)]);
        let nu = Fixed {
            pi: 0.7,
            e: 0.4,
            mu: 1.1,
        };
        let est = estimate_ate(&ds, &nu, TrialId(1)).unwrap();
        assert!(mean(&est.if_values).abs() < 1e-12);
    }
}
