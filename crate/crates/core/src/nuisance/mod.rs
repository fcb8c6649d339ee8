//! Nuisance functions `π_k(X)`, `e_k(a, X)` and `μ_{a,k}(X)` with K-fold
//! cross-fitting.

mod boosting;
mod folds;
mod logistic;
mod ols;

use std::collections::BTreeMap;

pub use boosting::{fit_boosted_stumps, Stump, StumpEnsemble, DEFAULT_LEARNING_RATE, DEFAULT_TREES};
pub use folds::assign_folds;
pub use logistic::{expit, fit_logistic, fit_softmax, logit, LogisticFit, SoftmaxFit};
pub use ols::{fit_linear_ls, LinearFit};

use crate::error::{Result, TateError};
use crate::linalg::{dot, Matrix};
use crate::model::{validate_dataset, Dataset, Observation, TreatmentId, TrialId};
use crate::scalar::Scalar;

/// Lower overlap bound applied to every probability evaluator.
pub const DEFAULT_OVERLAP_BOUND: f64 = 0.01;

/// Evaluators the doubly robust scores consume. `i` is the observation's
/// index in the dataset, so cross-fitted implementations can dispatch to the
/// models trained without that observation's fold.
pub trait Nuisance<T: Scalar>: Sync {
    /// `P(S = k | X)`.
    fn pi(&self, i: usize, obs: &Observation<T>, k: TrialId) -> T;
    /// `P(A = a | S = k, X)`.
    fn e(&self, i: usize, obs: &Observation<T>, k: TrialId, a: TreatmentId) -> T;
    /// `E[Y | A = a, S = k, X]`.
    fn mu(&self, i: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T;
}

impl<T: Scalar, N: Nuisance<T> + ?Sized> Nuisance<T> for &N {
    fn pi(&self, i: usize, obs: &Observation<T>, k: TrialId) -> T {
        (**self).pi(i, obs, k)
    }
    fn e(&self, i: usize, obs: &Observation<T>, k: TrialId, a: TreatmentId) -> T {
        (**self).e(i, obs, k, a)
    }
    fn mu(&self, i: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T {
        (**self).mu(i, obs, a, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeModelKind {
    LinearLeastSquares,
    /// For outcomes in `[0, 1]`.
    LogisticRegression,
    BoostedStumps {
        n_trees: usize,
        learning_rate: f64,
    },
}

impl OutcomeModelKind {
    pub fn boosted_default() -> Self {
        Self::BoostedStumps {
            n_trees: DEFAULT_TREES,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipModelKind {
    /// `π_k = n_k / n`, constant in `X`.
    EmpiricalProportion,
    MultinomialLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityModelKind {
    /// Design probability from the trial registry.
    KnownDesign,
    /// Out-of-fold arm frequency within the trial.
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceConfig {
    pub outcome_model: OutcomeModelKind,
    pub trial_membership: MembershipModelKind,
    pub treatment_propensity: PropensityModelKind,
    pub n_folds: usize,
    pub seed: u64,
    pub overlap_bound: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            outcome_model: OutcomeModelKind::LinearLeastSquares,
            trial_membership: MembershipModelKind::EmpiricalProportion,
            treatment_propensity: PropensityModelKind::KnownDesign,
            n_folds: 5,
            seed: 0,
            overlap_bound: DEFAULT_OVERLAP_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeModel<T> {
    Linear(Vec<T>),
    Logistic(Vec<T>),
    Stumps(StumpEnsemble<T>),
    Constant(T),
}

fn with_intercept<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut f = Vec::with_capacity(x.len() + 1);
    f.push(T::one());
    f.extend_from_slice(x);
    f
}

impl<T: Scalar> OutcomeModel<T> {
    pub fn predict(&self, x: &[T]) -> T {
        match self {
            OutcomeModel::Linear(beta) => dot(&with_intercept(x), beta),
            OutcomeModel::Logistic(beta) => expit(dot(&with_intercept(x), beta)),
            OutcomeModel::Stumps(model) => model.predict(x),
            OutcomeModel::Constant(c) => *c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Membership<T> {
    Constant(BTreeMap<TrialId, T>),
    /// Per fold; classes follow the registry order of `trial_index`.
    Softmax {
        trial_index: BTreeMap<TrialId, usize>,
        fits: Vec<SoftmaxFit<T>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Propensity<T> {
    Known,
    /// Per fold: out-of-fold share of `arm_a` in each trial.
    Empirical(Vec<BTreeMap<TrialId, T>>),
}

/// Fitted cross-fitted nuisances. Evaluation at observation `i` always uses
/// models trained on folds other than `fold_of(i)`.
#[derive(Debug, Clone)]
pub struct CrossFittedNuisance<T> {
    fold_of: Vec<usize>,
    n_folds: usize,
    trials: BTreeMap<TrialId, crate::model::TrialSpec<T>>,
    outcome: BTreeMap<(TrialId, TreatmentId), Vec<OutcomeModel<T>>>,
    membership: Membership<T>,
    propensity: Propensity<T>,
    overlap_bound: T,
    clip_events: usize,
    warnings: Vec<String>,
}

impl<T: Scalar> CrossFittedNuisance<T> {
    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i]
    }

    pub fn folds(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    /// Number of own-trial probability evaluations moved by overlap clipping.
    pub fn clip_events(&self) -> usize {
        self.clip_events
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn outcome_model(&self, fold: usize, a: TreatmentId, k: TrialId) -> Option<&OutcomeModel<T>> {
        self.outcome.get(&(k, a)).map(|m| &m[fold])
    }

    fn clip(&self, p: T) -> T {
        p.max(self.overlap_bound).min(T::one() - self.overlap_bound)
    }

    /// Unclipped trial-membership probability from the model excluding `fold`.
    pub fn pi_raw(&self, fold: usize, k: TrialId, x: &[T]) -> T {
        match &self.membership {
            Membership::Constant(p) => p.get(&k).copied().unwrap_or(T::zero()),
            Membership::Softmax { trial_index, fits } => match trial_index.get(&k) {
                Some(&c) => fits[fold].probabilities(&with_intercept(x))[c],
                None => T::zero(),
            },
        }
    }

    pub fn pi_fold(&self, fold: usize, k: TrialId, x: &[T]) -> T {
        self.clip(self.pi_raw(fold, k, x))
    }

    pub fn e_fold(&self, fold: usize, k: TrialId, a: TreatmentId) -> T {
        let Some(spec) = self.trials.get(&k) else {
            return self.overlap_bound;
        };
        let p_a = match &self.propensity {
            Propensity::Known => spec.p_arm_a,
            Propensity::Empirical(per_fold) => per_fold[fold].get(&k).copied().unwrap_or(spec.p_arm_a),
        };
        let raw = if a == spec.arm_a {
            p_a
        } else if a == spec.arm_b {
            T::one() - p_a
        } else {
            T::zero()
        };
        self.clip(raw)
    }

    pub fn mu_fold(&self, fold: usize, a: TreatmentId, k: TrialId, x: &[T]) -> T {
        self.outcome
            .get(&(k, a))
            .map_or(T::zero(), |models| models[fold].predict(x))
    }
}

impl<T: Scalar> Nuisance<T> for CrossFittedNuisance<T> {
    fn pi(&self, i: usize, obs: &Observation<T>, k: TrialId) -> T {
        self.pi_fold(self.fold_of[i], k, &obs.x)
    }
    fn e(&self, i: usize, _obs: &Observation<T>, k: TrialId, a: TreatmentId) -> T {
        self.e_fold(self.fold_of[i], k, a)
    }
    fn mu(&self, i: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T {
        self.mu_fold(self.fold_of[i], a, k, &obs.x)
    }
}

fn fit_outcome<T: Scalar>(
    kind: OutcomeModelKind,
    rows: &[&Observation<T>],
    warnings: &mut Vec<String>,
    label: &str,
) -> OutcomeModel<T> {
    let y: Vec<T> = rows.iter().map(|o| o.y).collect();
    let cell_mean = || OutcomeModel::Constant(crate::scalar::mean(&y));
    match kind {
        OutcomeModelKind::LinearLeastSquares => {
            let x = Matrix::from_rows(&rows.iter().map(|o| with_intercept(&o.x)).collect::<Vec<_>>());
            match fit_linear_ls(&x, &y) {
                Some(fit) => {
                    if fit.ridge > T::zero() {
                        warnings.push(format!("{label}: ill-conditioned design, ridge {}", fit.ridge));
                    }
                    OutcomeModel::Linear(fit.coefficients)
                }
                None => {
                    warnings.push(format!("{label}: singular design, using cell mean"));
                    cell_mean()
                }
            }
        }
        OutcomeModelKind::LogisticRegression => {
            let x = Matrix::from_rows(&rows.iter().map(|o| with_intercept(&o.x)).collect::<Vec<_>>());
            let fit = fit_logistic(&x, &y, None);
            if !fit.converged {
                warnings.push(format!("{label}: logistic fit did not converge"));
            }
            if fit.coefficients.iter().all(|c| c.is_finite()) {
                OutcomeModel::Logistic(fit.coefficients)
            } else {
                warnings.push(format!("{label}: non-finite logistic fit, using cell mean"));
                cell_mean()
            }
        }
        OutcomeModelKind::BoostedStumps { n_trees, learning_rate } => {
            let x = Matrix::from_rows(&rows.iter().map(|o| o.x.clone()).collect::<Vec<_>>());
            OutcomeModel::Stumps(fit_boosted_stumps(&x, &y, n_trees, T::of(learning_rate)))
        }
    }
}

/// Fits every nuisance model on each fold complement.
pub fn fit_cross_fitted<T: Scalar>(dataset: &Dataset<T>, config: &NuisanceConfig) -> Result<CrossFittedNuisance<T>> {
    let violations = validate_dataset(dataset);
    if !violations.is_empty() {
        return Err(TateError::InvalidDataset(
            violations.iter().map(ToString::to_string).collect(),
        ));
    }
    if !(config.overlap_bound >= 0.0 && config.overlap_bound < 0.5) {
        return Err(TateError::Config(format!(
            "overlap bound {} outside [0, 0.5)",
            config.overlap_bound
        )));
    }
    let fold_of = assign_folds(dataset, config.n_folds, config.seed)?;
    let k_folds = config.n_folds;
    let n = dataset.n();
    let mut warnings = Vec::new();

    let mut outcome = BTreeMap::new();
    let referenced: std::collections::BTreeSet<TrialId> = dataset.observations.iter().map(|o| o.s).collect();
    for &k in &referenced {
        let spec = &dataset.trials[&k];
        for a in spec.arms() {
            let models = (0..k_folds)
                .map(|f| {
                    let rows: Vec<&Observation<T>> = dataset
                        .observations
                        .iter()
                        .enumerate()
                        .filter(|(i, o)| o.s == k && o.a == a && fold_of[*i] != f)
                        .map(|(_, o)| o)
                        .collect();
                    fit_outcome(
                        config.outcome_model,
                        &rows,
                        &mut warnings,
                        &format!("mu(arm {a}, trial {k}, fold {f})"),
                    )
                })
                .collect();
            outcome.insert((k, a), models);
        }
    }

    let membership = match config.trial_membership {
        MembershipModelKind::EmpiricalProportion => {
            let nn = T::of_usize(n);
            Membership::Constant(
                dataset
                    .trials
                    .keys()
                    .map(|&k| (k, T::of_usize(dataset.trial_size(k)) / nn))
                    .collect(),
            )
        }
        MembershipModelKind::MultinomialLogistic => {
            let trial_index: BTreeMap<TrialId, usize> =
                dataset.trials.keys().enumerate().map(|(c, &k)| (k, c)).collect();
            let fits = (0..k_folds)
                .map(|f| {
                    let train: Vec<&Observation<T>> = dataset
                        .observations
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| fold_of[*i] != f)
                        .map(|(_, o)| o)
                        .collect();
                    let x = Matrix::from_rows(&train.iter().map(|o| with_intercept(&o.x)).collect::<Vec<_>>());
                    let classes: Vec<usize> = train.iter().map(|o| trial_index[&o.s]).collect();
                    let fit = fit_softmax(&x, &classes, trial_index.len());
                    if !fit.converged {
                        warnings.push(format!("pi(fold {f}): softmax fit did not converge"));
                    }
                    fit
                })
                .collect();
            Membership::Softmax { trial_index, fits }
        }
    };

    let propensity = match config.treatment_propensity {
        PropensityModelKind::KnownDesign => Propensity::Known,
        PropensityModelKind::Empirical => Propensity::Empirical(
            (0..k_folds)
                .map(|f| {
                    let mut counts: BTreeMap<TrialId, (usize, usize)> = BTreeMap::new();
                    for (i, o) in dataset.observations.iter().enumerate() {
                        if fold_of[i] == f {
                            continue;
                        }
                        let c = counts.entry(o.s).or_default();
                        c.1 += 1;
                        if o.a == dataset.trials[&o.s].arm_a {
                            c.0 += 1;
                        }
                    }
                    counts
                        .into_iter()
                        .map(|(k, (a, tot))| (k, T::of_usize(a) / T::of_usize(tot)))
                        .collect()
                })
                .collect(),
        ),
    };

    let mut fitted = CrossFittedNuisance {
        fold_of,
        n_folds: k_folds,
        trials: dataset.trials.clone(),
        outcome,
        membership,
        propensity,
        overlap_bound: T::of(config.overlap_bound),
        clip_events: 0,
        warnings,
    };

    let mut clips = 0;
    for (i, o) in dataset.observations.iter().enumerate() {
        let f = fitted.fold_of[i];
        let raw = fitted.pi_raw(f, o.s, &o.x);
        if fitted.clip(raw) != raw {
            clips += 1;
        }
        let spec = &dataset.trials[&o.s];
        let p_a = match &fitted.propensity {
            Propensity::Known => spec.p_arm_a,
            Propensity::Empirical(per_fold) => per_fold[f].get(&o.s).copied().unwrap_or(spec.p_arm_a),
        };
        for raw in [p_a, T::one() - p_a] {
            if fitted.clip(raw) != raw {
                clips += 1;
            }
        }
    }
    fitted.clip_events = clips;
    if clips > 0 {
        fitted.warnings.push(format!(
            "{clips} probability evaluations clipped to [{0}, 1 - {0}]",
            config.overlap_bound
        ));
    }
    Ok(fitted)
}

type PiAdjust<'a, T> = Box<dyn Fn(&Observation<T>, TrialId, T) -> T + Sync + 'a>;
type EAdjust<'a, T> = Box<dyn Fn(&Observation<T>, TrialId, TreatmentId, T) -> T + Sync + 'a>;
type MuAdjust<'a, T> = Box<dyn Fn(usize, &Observation<T>, TreatmentId, TrialId, T) -> T + Sync + 'a>;

/// Wraps a nuisance and rewrites selected evaluator outputs. Each closure
/// receives the wrapped value as its last argument.
pub struct Adjusted<'a, T, N> {
    inner: N,
    pi: Option<PiAdjust<'a, T>>,
    e: Option<EAdjust<'a, T>>,
    mu: Option<MuAdjust<'a, T>>,
}

impl<'a, T: Scalar, N: Nuisance<T>> Adjusted<'a, T, N> {
    pub fn new(inner: N) -> Self {
        Self {
            inner,
            pi: None,
            e: None,
            mu: None,
        }
    }

    pub fn with_pi(mut self, f: impl Fn(&Observation<T>, TrialId, T) -> T + Sync + 'a) -> Self {
        self.pi = Some(Box::new(f));
        self
    }

    pub fn with_e(mut self, f: impl Fn(&Observation<T>, TrialId, TreatmentId, T) -> T + Sync + 'a) -> Self {
        self.e = Some(Box::new(f));
        self
    }

    pub fn with_mu(mut self, f: impl Fn(usize, &Observation<T>, TreatmentId, TrialId, T) -> T + Sync + 'a) -> Self {
        self.mu = Some(Box::new(f));
        self
    }

    /// Outcome regression replaced by zero everywhere.
    pub fn zero_outcome(inner: N) -> Self {
        Self::new(inner).with_mu(|_, _, _, _, _| T::zero())
    }
}

impl<T: Scalar, N: Nuisance<T>> Nuisance<T> for Adjusted<'_, T, N> {
    fn pi(&self, i: usize, obs: &Observation<T>, k: TrialId) -> T {
        let v = self.inner.pi(i, obs, k);
        self.pi.as_ref().map_or(v, |f| f(obs, k, v))
    }
    fn e(&self, i: usize, obs: &Observation<T>, k: TrialId, a: TreatmentId) -> T {
        let v = self.inner.e(i, obs, k, a);
        self.e.as_ref().map_or(v, |f| f(obs, k, a, v))
    }
    fn mu(&self, i: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T {
        let v = self.inner.mu(i, obs, a, k);
        self.mu.as_ref().map_or(v, |f| f(i, obs, a, k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrialSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_dataset(n_per_trial: usize, trials: usize, noise: f64, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<TrialSpec<f64>> = (1..=trials as u32)
            .map(|k| TrialSpec {
                trial_id: TrialId(k),
                arm_a: TreatmentId(1),
                arm_b: TreatmentId(0),
                t0: 0,
                t1: k as i64,
                p_arm_a: 0.5,
            })
            .collect();
        let mut obs = Vec::new();
        for k in 1..=trials as u32 {
            for i in 0..n_per_trial {
                let a = (i % 2) as u32;
                let x = vec![
                    rng.random::<f64>() * 2.0 - 1.0,
                    (rng.random::<f64>() < 0.5) as u8 as f64,
                ];
                let y =
                    (1.0 + a as f64) * (2.0 + 0.5 * x[0] + 0.3 * x[1]) * k as f64 + noise * (rng.random::<f64>() - 0.5);
                obs.push(Observation {
                    y,
                    a: TreatmentId(a),
                    s: TrialId(k),
                    x,
                });
            }
        }
        Dataset::new(specs, obs, 2)
    }

    #[test]
    fn linear_outcome_recovers_noiseless_surface() {
        let ds = linear_dataset(60, 2, 0.0, 1);
        let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
        for (i, o) in ds.observations.iter().enumerate() {
            for a in [0u32, 1] {
                let truth = (1.0 + a as f64) * (2.0 + 0.5 * o.x[0] + 0.3 * o.x[1]) * o.s.0 as f64;
                assert!((nu.mu(i, o, TreatmentId(a), o.s) - truth).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn known_design_and_empirical_proportion() {
        let ds = linear_dataset(30, 6, 1.0, 2);
        let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
        let o = &ds.observations[0];
        assert_eq!(nu.e(0, o, o.s, TreatmentId(1)), 0.5);
        for k in 1..=6 {
            assert!((nu.pi(0, o, TrialId(k)) - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(nu.clip_events(), 0);
    }

    #[test]
    fn softmax_membership_sums_to_one() {
        let ds = linear_dataset(30, 3, 1.0, 3);
        let cfg = NuisanceConfig {
            trial_membership: MembershipModelKind::MultinomialLogistic,
            treatment_propensity: PropensityModelKind::Empirical,
            ..NuisanceConfig::default()
        };
        let nu = fit_cross_fitted(&ds, &cfg).unwrap();
        for (i, o) in ds.observations.iter().enumerate().take(20) {
            let f = nu.fold_of(i);
            let total: f64 = (1..=3).map(|k| nu.pi_raw(f, TrialId(k), &o.x)).sum();
            assert!((total - 1.0).abs() < 1e-10);
            let e = nu.e(i, o, o.s, TreatmentId(1));
            assert!(e > 0.0 && e < 1.0);
        }
    }

    #[test]
    fn out_of_fold_discipline() {
        let ds = linear_dataset(40, 2, 1.0, 4);
        let cfg = NuisanceConfig::default();
        let nu = fit_cross_fitted(&ds, &cfg).unwrap();
        let target = 5;
        let mut flipped = ds.clone();
        flipped.observations[target].y += 100.0;
        let nu2 = fit_cross_fitted(&flipped, &cfg).unwrap();
        let f = nu.fold_of(target);
        for (j, o) in ds.observations.iter().enumerate() {
            if nu.fold_of(j) == f {
                for a in [0u32, 1] {
                    assert_eq!(nu.mu(j, o, TreatmentId(a), o.s), nu2.mu(j, o, TreatmentId(a), o.s));
                }
            }
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let ds = linear_dataset(40, 2, 1.0, 5);
        let cfg = NuisanceConfig {
            outcome_model: OutcomeModelKind::BoostedStumps {
                n_trees: 20,
                learning_rate: 0.2,
            },
            ..NuisanceConfig::default()
        };
        let a = fit_cross_fitted(&ds, &cfg).unwrap();
        let b = fit_cross_fitted(&ds, &cfg).unwrap();
        for (i, o) in ds.observations.iter().enumerate() {
            assert_eq!(
                a.mu(i, o, TreatmentId(1), o.s).to_bits(),
                b.mu(i, o, TreatmentId(1), o.s).to_bits()
            );
        }
    }

    #[test]
    fn clipping_bounds_probabilities() {
        let mut ds = linear_dataset(40, 2, 1.0, 6);
        ds.trials.get_mut(&TrialId(1)).unwrap().p_arm_a = 0.001;
        let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
        let o = &ds.observations[0];
        assert_eq!(nu.e(0, o, TrialId(1), TreatmentId(1)), 0.01);
        assert_eq!(nu.e(0, o, TrialId(1), TreatmentId(0)), 0.99);
        assert!(nu.clip_events() > 0);
    }
}
