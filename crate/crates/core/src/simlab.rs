//! Simulation design with a sinusoidal temporal modifier, an oracle
//! estimator that knows the true temporal ratio, and a parallel Monte Carlo
//! driver reporting bias, RMSE, SE ratio and coverage.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dr::{estimate_ate_with, InfluenceForm};
use crate::error::{Result, TateError};
use crate::model::{CommonArmAnchor, Dataset, Observation, Strategy, TransportQuery, TreatmentId, TrialId, TrialSpec};
use crate::nuisance::{fit_cross_fitted, Nuisance, NuisanceConfig};
use crate::scalar::Scalar;
use crate::tmle::{estimate_tate_tmle, Link, TmleVariant};
use crate::transport::{assemble_wald_ci, estimate_tate, EstimationOptions, TateResult};

/// `Λ(t) = 1 + γ·sin(2πt/12)`.
pub fn lambda_modifier(t: i64, gamma: f64) -> f64 {
    1.0 + gamma * (2.0 * PI * t as f64 / 12.0).sin()
}

/// Linear response `θ_a(x) = c₀ + c₁x₁ + c₂x₂` for each arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaCoefficients {
    pub arms: BTreeMap<TreatmentId, [f64; 3]>,
}

impl Default for ThetaCoefficients {
    fn default() -> Self {
        let base = [2.0, 0.5, 0.3];
        let shifted = |d: [f64; 3]| [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
        Self {
            arms: BTreeMap::from([
                (TreatmentId(0), base),
                (TreatmentId(1), shifted([1.0, 0.4, 0.2])),
                (TreatmentId(2), shifted([0.5, 0.2, 0.1])),
            ]),
        }
    }
}

impl ThetaCoefficients {
    pub fn response(&self, arm: TreatmentId, x: &[f64]) -> Result<f64> {
        let c = self
            .arms
            .get(&arm)
            .ok_or_else(|| TateError::Config(format!("no response surface for arm {arm}")))?;
        Ok(c[0] + c[1] * x[0] + c[2] * x[1])
    }

    /// `E[θ_a(X)]` with `E[X₁] = 0`, `E[X₂] = 1/2`.
    pub fn expected(&self, arm: TreatmentId) -> Result<f64> {
        self.response(arm, &[0.0, 0.5])
    }
}

/// `θ_a(x)` under the default coefficients.
pub fn theta_response(arm: TreatmentId, x: &[f64]) -> Result<f64> {
    ThetaCoefficients::default().response(arm, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DgpTrial {
    pub k: u32,
    pub arm_a: u32,
    pub arm_b: u32,
    pub t0: i64,
    pub t1: i64,
}

impl DgpTrial {
    const fn new(k: u32, arm_a: u32, arm_b: u32, t0: i64, t1: i64) -> Self {
        Self {
            k,
            arm_a,
            arm_b,
            t0,
            t1,
        }
    }
}

/// Six trials: the target (1 vs 0 at (1,3)), a replicate at the target time
/// and one at the source time, a 2-vs-0 trial at each measurement time, and
/// a 1-vs-0 trial at (4,6).
pub const STANDARD_TRIALS: [DgpTrial; 6] = [
    DgpTrial::new(1, 1, 0, 1, 3),
    DgpTrial::new(2, 1, 0, 7, 9),
    DgpTrial::new(3, 1, 0, 1, 3),
    DgpTrial::new(4, 2, 0, 1, 3),
    DgpTrial::new(5, 2, 0, 7, 9),
    DgpTrial::new(6, 1, 0, 4, 6),
];

/// The standard design with trial 6 moved to (0,3): arm 1 is then observed
/// at the source measurement time after a longer gap than arm 0, so a
/// gap-dependent modifier makes the two anchors disagree.
pub const POWER_TRIALS: [DgpTrial; 6] = [
    DgpTrial::new(1, 1, 0, 1, 3),
    DgpTrial::new(2, 1, 0, 7, 9),
    DgpTrial::new(3, 1, 0, 1, 3),
    DgpTrial::new(4, 2, 0, 1, 3),
    DgpTrial::new(5, 2, 0, 7, 9),
    DgpTrial::new(6, 1, 0, 0, 3),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub gamma: f64,
    pub noise_sd: f64,
    pub theta: ThetaCoefficients,
    pub trial_table: Vec<DgpTrial>,
    pub n_total: usize,
    pub p_arm: f64,
    pub seed: u64,
    /// Adds `κ·(t₁ − t₀ − 2)` to the modifier; zero keeps it a function of `t₁` only.
    pub violation_kappa: f64,
    /// Antithetic `X₁` pairs, exactly half `X₂ = 1` and exact arm counts per
    /// trial, so sample covariate moments equal population moments.
    pub balanced_covariates: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            noise_sd: 1.0,
            theta: ThetaCoefficients::default(),
            trial_table: STANDARD_TRIALS.to_vec(),
            n_total: 1200,
            p_arm: 0.5,
            seed: 0,
            violation_kappa: 0.0,
            balanced_covariates: false,
        }
    }
}

impl DgpConfig {
    pub fn lambda_eff(&self, t0: i64, t1: i64) -> f64 {
        lambda_modifier(t1, self.gamma) + self.violation_kappa * (t1 - t0 - 2) as f64
    }

    pub fn trial_specs<T: Scalar>(&self) -> Vec<TrialSpec<T>> {
        self.trial_table
            .iter()
            .map(|t| TrialSpec {
                trial_id: TrialId(t.k),
                arm_a: TreatmentId(t.arm_a),
                arm_b: TreatmentId(t.arm_b),
                t0: t.t0,
                t1: t.t1,
                p_arm_a: T::of(self.p_arm),
            })
            .collect()
    }

    /// Trial sizes: `⌊n/K⌋` each, remainder spread over the first trials.
    pub fn trial_sizes(&self) -> Vec<usize> {
        let k = self.trial_table.len();
        (0..k)
            .map(|i| self.n_total / k + usize::from(i < self.n_total % k))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma.abs() < 1.0) {
            return Err(TateError::Config(format!("gamma = {} must lie in (-1, 1)", self.gamma)));
        }
        if !(self.p_arm > 0.0 && self.p_arm < 1.0) {
            return Err(TateError::Config(format!("p_arm = {} must lie in (0, 1)", self.p_arm)));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(TateError::Config(format!(
                "noise_sd = {} must be non-negative",
                self.noise_sd
            )));
        }
        if self.trial_table.is_empty() {
            return Err(TateError::Config("empty trial table".into()));
        }
        for t in &self.trial_table {
            for arm in [t.arm_a, t.arm_b] {
                if !self.theta.arms.contains_key(&TreatmentId(arm)) {
                    return Err(TateError::Config(format!(
                        "trial {}: no response surface for arm {arm}",
                        t.k
                    )));
                }
            }
        }
        if self.balanced_covariates && self.trial_sizes().iter().any(|m| m % 2 == 1) {
            return Err(TateError::Config("balanced covariates need even trial sizes".into()));
        }
        Ok(())
    }
}

/// One simulated dataset; deterministic given `config.seed`.
pub fn draw_dataset<T: Scalar>(config: &DgpConfig) -> Result<Dataset<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut observations = Vec::with_capacity(config.n_total);
    for (trial, &n_k) in config.trial_table.iter().zip(&config.trial_sizes()) {
        let modifier = config.lambda_eff(trial.t0, trial.t1);
        let covariates: Vec<[f64; 2]> = if config.balanced_covariates {
            let half = n_k / 2;
            let z: Vec<f64> = (0..half).map(|_| rng.sample(StandardNormal)).collect();
            let mut x2: Vec<f64> = (0..n_k).map(|i| if i < half { 1.0 } else { 0.0 }).collect();
            x2.shuffle(&mut rng);
            (0..n_k)
                .map(|i| [if i % 2 == 0 { z[i / 2] } else { -z[i / 2] }, x2[i]])
                .collect()
        } else {
            (0..n_k)
                .map(|_| [rng.sample(StandardNormal), f64::from(u8::from(rng.random_bool(0.5)))])
                .collect()
        };
        let treated: Vec<bool> = if config.balanced_covariates {
            let n_a = (config.p_arm * n_k as f64).round() as usize;
            let mut v: Vec<bool> = (0..n_k).map(|i| i < n_a).collect();
            v.shuffle(&mut rng);
            v
        } else {
            (0..n_k).map(|_| rng.random_bool(config.p_arm)).collect()
        };
        for (x, is_a) in covariates.iter().zip(treated) {
            let arm = TreatmentId(if is_a { trial.arm_a } else { trial.arm_b });
            let noise: f64 = if config.noise_sd > 0.0 {
                config.noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let y = config.theta.response(arm, x)? * modifier + noise;
            observations.push(Observation {
                y: T::of(y),
                a: arm,
                s: TrialId(trial.k),
                x: vec![T::of(x[0]), T::of(x[1])],
            });
        }
    }
    Ok(Dataset::new(config.trial_specs(), observations, 2))
}

/// Analytic transported effect `E[θ_a − θ_b]·Λ(t₁* + δ₁)` for the target trial.
pub fn true_tate(config: &DgpConfig, k_star: TrialId, _delta0: i64, delta1: i64) -> Result<f64> {
    if config.violation_kappa != 0.0 {
        return Err(TateError::Unsupported(
            "analytic truth is defined only when the modifier depends on the measurement time alone".into(),
        ));
    }
    let t = config
        .trial_table
        .iter()
        .find(|t| t.k == k_star.0)
        .ok_or_else(|| TateError::Config(format!("unknown target trial {k_star}")))?;
    let effect = config.theta.expected(TreatmentId(t.arm_a))? - config.theta.expected(TreatmentId(t.arm_b))?;
    Ok(effect * lambda_modifier(t.t1 + delta1, config.gamma))
}

/// True temporal ratio `Λ(t₀*+δ₀, t₁*+δ₁)/Λ(t₀*, t₁*)`.
pub fn true_ratio(config: &DgpConfig, k_star: TrialId, delta0: i64, delta1: i64) -> Result<f64> {
    let t = config
        .trial_table
        .iter()
        .find(|t| t.k == k_star.0)
        .ok_or_else(|| TateError::Config(format!("unknown target trial {k_star}")))?;
    Ok(config.lambda_eff(t.t0 + delta0, t.t1 + delta1) / config.lambda_eff(t.t0, t.t1))
}

/// The true nuisance functions of the design: `μ_{a,k}(x) = θ_a(x)·Λ_eff(k)`,
/// `π_k = n_k/n` of the dataset at hand and the design propensity.
#[derive(Debug, Clone)]
pub struct OracleNuisance<T> {
    theta: ThetaCoefficients,
    modifier: BTreeMap<TrialId, f64>,
    pi: BTreeMap<TrialId, T>,
    design: BTreeMap<TrialId, TrialSpec<T>>,
}

impl<T: Scalar> OracleNuisance<T> {
    pub fn new(config: &DgpConfig, dataset: &Dataset<T>) -> Self {
        let n = T::of_usize(dataset.n());
        Self {
            theta: config.theta.clone(),
            modifier: config
                .trial_table
                .iter()
                .map(|t| (TrialId(t.k), config.lambda_eff(t.t0, t.t1)))
                .collect(),
            pi: dataset
                .trials
                .keys()
                .map(|&k| (k, T::of_usize(dataset.trial_size(k)) / n))
                .collect(),
            design: dataset.trials.clone(),
        }
    }
}

impl<T: Scalar> Nuisance<T> for OracleNuisance<T> {
    fn pi(&self, _: usize, _: &Observation<T>, k: TrialId) -> T {
        self.pi.get(&k).copied().unwrap_or(T::zero())
    }
    fn e(&self, _: usize, _: &Observation<T>, k: TrialId, a: TreatmentId) -> T {
        self.design
            .get(&k)
            .and_then(|s| s.design_probability(a))
            .unwrap_or(T::zero())
    }
    fn mu(&self, _: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T {
        let x: Vec<f64> = obs.x.iter().map(|v| v.as_f64()).collect();
        let theta = self.theta.response(a, &x).unwrap_or(f64::NAN);
        T::of(theta * self.modifier.get(&k).copied().unwrap_or(f64::NAN))
    }
}

/// `ψ̂ = τ̂_{k*}·r` with the ratio `r` known.
pub fn oracle_estimator<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    k_star: TrialId,
    true_ratio: T,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    if !true_ratio.is_finite() {
        return Err(TateError::Config("oracle ratio must be finite".into()));
    }
    let tau = estimate_ate_with(dataset, nuisance, k_star, options.mean_estimator, options.influence)?;
    let spec = &dataset.trials[&k_star];
    let psi = tau.value * true_ratio;
    let if_values: Vec<T> = tau.if_values.iter().map(|&f| true_ratio * f).collect();
    let est = crate::dr::EstimateWithIF {
        value: psi,
        if_values,
        n: tau.n,
    };
    let std_error = est.std_error();
    let (ci_low, ci_high) = assemble_wald_ci(psi, std_error, options.alpha);
    Ok(TateResult {
        psi,
        std_error,
        ci_low,
        ci_high,
        ratio: true_ratio,
        closed_form_se: std_error,
        components: BTreeMap::from([(format!("tau[{k_star}]"), tau)]),
        if_values: est.if_values,
        warnings: Vec::new(),
        cell_gradient: BTreeMap::from([((spec.arm_a, k_star), true_ratio), ((spec.arm_b, k_star), -true_ratio)]),
        weights: Vec::new(),
        spec_test: None,
    })
}

/// Estimators compared in the simulation study. All target trial 1 moved
/// by `(6, 6)` in the standard design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EstimatorKind {
    Oracle,
    /// Replicated trials 2 (target time) and 3 (source time).
    S1,
    /// Control arm in trials 5 and 4.
    S2C,
    /// Arm 2 in trials 5 and 4.
    S2T,
    /// Both common arms, optimally weighted.
    S2M,
    S1TmleFactorized,
    S1TmleJoint,
    S2MTmleFactorized,
    S2MTmleJoint,
}

impl EstimatorKind {
    pub const TABLE: [EstimatorKind; 5] = [Self::Oracle, Self::S1, Self::S2C, Self::S2T, Self::S2M];
    pub const ALL: [EstimatorKind; 9] = [
        Self::Oracle,
        Self::S1,
        Self::S2C,
        Self::S2T,
        Self::S2M,
        Self::S1TmleFactorized,
        Self::S1TmleJoint,
        Self::S2MTmleFactorized,
        Self::S2MTmleJoint,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Oracle => "Oracle",
            Self::S1 => "S1",
            Self::S2C => "S2-C",
            Self::S2T => "S2-T",
            Self::S2M => "S2-M",
            Self::S1TmleFactorized => "S1-TMLE",
            Self::S1TmleJoint => "S1-TMLE-joint",
            Self::S2MTmleFactorized => "S2-M-TMLE",
            Self::S2MTmleJoint => "S2-M-TMLE-joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.label().eq_ignore_ascii_case(s.trim()))
    }

    /// Transport query in the standard design; `None` for the oracle.
    pub fn query(self) -> Option<TransportQuery> {
        let anchor = |arm| CommonArmAnchor {
            arm: TreatmentId(arm),
            trial_at_target: TrialId(5),
            trial_at_source: TrialId(4),
        };
        let strategy = match self {
            Self::Oracle => return None,
            Self::S1 | Self::S1TmleFactorized | Self::S1TmleJoint => Strategy::Replicated {
                anchor_j: TrialId(2),
                anchor_jprime: TrialId(3),
            },
            Self::S2C => Strategy::CommonArm {
                anchors: vec![anchor(0)],
            },
            Self::S2T => Strategy::CommonArm {
                anchors: vec![anchor(2)],
            },
            Self::S2M | Self::S2MTmleFactorized | Self::S2MTmleJoint => Strategy::CommonArm {
                anchors: vec![anchor(0), anchor(2)],
            },
        };
        Some(TransportQuery {
            target_trial: TrialId(1),
            delta0: 6,
            delta1: 6,
            strategy,
        })
    }

    fn tmle_variant(self) -> Option<TmleVariant> {
        match self {
            Self::S1TmleFactorized | Self::S2MTmleFactorized => Some(TmleVariant::Factorized),
            Self::S1TmleJoint | Self::S2MTmleJoint => Some(TmleVariant::Joint),
            _ => None,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Runs one estimator of the study on a dataset.
pub fn run_estimator<T: Scalar, N: Nuisance<T>>(
    kind: EstimatorKind,
    config: &DgpConfig,
    dataset: &Dataset<T>,
    nuisance: &N,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    match (kind.query(), kind.tmle_variant()) {
        (None, _) => oracle_estimator(
            dataset,
            nuisance,
            TrialId(1),
            T::of(true_ratio(config, TrialId(1), 6, 6)?),
            options,
        ),
        (Some(q), None) => estimate_tate(dataset, nuisance, &q, options),
        (Some(q), Some(variant)) => {
            estimate_tate_tmle(dataset, nuisance, &q, variant, Link::Linear, options).map(|r| r.0)
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `r`: `splitmix64(master ⊕ splitmix64(r))`.
pub fn substream_seed(master: u64, r: u64) -> u64 {
    splitmix64(master ^ splitmix64(r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    pub master_seed: u64,
    pub nuisance: NuisanceConfig,
    pub alpha: f64,
    pub influence: InfluenceForm,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            reps: 500,
            estimators: EstimatorKind::TABLE.to_vec(),
            master_seed: 0,
            nuisance: NuisanceConfig::default(),
            alpha: 0.05,
            influence: InfluenceForm::default(),
        }
    }
}

/// Summary of one estimator across replications.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMetrics {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Mean estimated SE over the SD (denominator B−1) of the estimates.
    pub se_ratio: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub empirical_sd: f64,
    pub successes: usize,
    pub failures: usize,
    /// Failure messages with their counts.
    pub failure_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McMetrics {
    pub reps: usize,
    pub rows: Vec<EstimatorMetrics>,
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Estimate { psi: f64, se: f64, ci: (f64, f64) },
    Failed(String),
}

/// Per-replication results, outer index = replication, inner = estimator.
pub fn simulate_replications(config: &MonteCarloConfig) -> Result<Vec<Vec<Draw>>> {
    if config.reps < 2 {
        return Err(TateError::Config("Monte Carlo needs at least 2 replications".into()));
    }
    config.dgp.validate()?;
    let options = EstimationOptions {
        influence: config.influence,
        ..EstimationOptions::with_alpha(config.alpha)
    };
    let one = |r: usize| -> Vec<Draw> {
        let seed = substream_seed(config.master_seed, r as u64);
        let dgp = DgpConfig {
            seed,
            ..config.dgp.clone()
        };
        let nuisance_config = NuisanceConfig {
            seed: splitmix64(seed),
            ..config.nuisance.clone()
        };
        let fail_all = |msg: String| vec![Draw::Failed(msg); config.estimators.len()];
        let dataset = match draw_dataset::<f64>(&dgp) {
            Ok(d) => d,
            Err(e) => return fail_all(e.to_string()),
        };
        let nuisance = match fit_cross_fitted(&dataset, &nuisance_config) {
            Ok(n) => n,
            Err(e) => return fail_all(e.to_string()),
        };
        config
            .estimators
            .iter()
            .map(|&kind| match run_estimator(kind, &dgp, &dataset, &nuisance, &options) {
                Ok(r) if r.psi.is_finite() && r.std_error.is_finite() => Draw::Estimate {
                    psi: r.psi,
                    se: r.std_error,
                    ci: (r.ci_low, r.ci_high),
                },
                Ok(_) => Draw::Failed("non-finite estimate".into()),
                Err(e) => Draw::Failed(e.to_string()),
            })
            .collect()
    };
    Ok((0..config.reps).into_par_iter().map(one).collect())
}

/// Runs the study and aggregates in replication order, so results do not
/// depend on thread scheduling.
pub fn run_monte_carlo(config: &MonteCarloConfig) -> Result<McMetrics> {
    let truth = true_tate(&config.dgp, TrialId(1), 6, 6)?;
    let draws = simulate_replications(config)?;
    let rows = config
        .estimators
        .iter()
        .enumerate()
        .map(|(j, &kind)| summarize(kind, config.dgp.n_total, truth, draws.iter().map(|d| &d[j])))
        .collect();
    Ok(McMetrics {
        reps: config.reps,
        rows,
    })
}

/// Bias, RMSE, SE ratio and coverage over the successful draws.
pub fn summarize<'a>(
    estimator: EstimatorKind,
    n: usize,
    truth: f64,
    draws: impl Iterator<Item = &'a Draw>,
) -> EstimatorMetrics {
    let mut psi = Vec::new();
    let mut se = Vec::new();
    let mut covered = 0usize;
    let mut failure_reasons = BTreeMap::new();
    let mut failures = 0;
    for d in draws {
        match d {
            Draw::Estimate { psi: p, se: s, ci } => {
                psi.push(*p);
                se.push(*s);
                if ci.0 <= truth && truth <= ci.1 {
                    covered += 1;
                }
            }
            Draw::Failed(msg) => {
                failures += 1;
                *failure_reasons.entry(msg.clone()).or_insert(0) += 1;
            }
        }
    }
    let b = psi.len();
    let bf = b as f64;
    let mean_psi = psi.iter().sum::<f64>() / bf;
    let bias = mean_psi - truth;
    let rmse = (psi.iter().map(|p| (p - truth).powi(2)).sum::<f64>() / bf).sqrt();
    let empirical_sd = (psi.iter().map(|p| (p - mean_psi).powi(2)).sum::<f64>() / (bf - 1.0)).sqrt();
    let mean_se = se.iter().sum::<f64>() / bf;
    EstimatorMetrics {
        estimator,
        n,
        truth,
        bias,
        rmse,
        se_ratio: mean_se / empirical_sd,
        coverage: covered as f64 / bf,
        mean_se,
        empirical_sd,
        successes: b,
        failures,
        failure_reasons,
    }
}

/// Query with two common-arm anchors at different administration-to-measurement
/// gaps under [`POWER_TRIALS`]: arm 0 via trials 5/4 and arm 1 via trials 2/6.
pub fn power_query() -> TransportQuery {
    TransportQuery {
        target_trial: TrialId(1),
        delta0: 6,
        delta1: 6,
        strategy: Strategy::CommonArm {
            anchors: vec![
                CommonArmAnchor {
                    arm: TreatmentId(0),
                    trial_at_target: TrialId(5),
                    trial_at_source: TrialId(4),
                },
                CommonArmAnchor {
                    arm: TreatmentId(1),
                    trial_at_target: TrialId(2),
                    trial_at_source: TrialId(6),
                },
            ],
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionRate {
    pub rate: f64,
    pub rejections: usize,
    pub valid: usize,
    pub failures: usize,
}

/// Fraction of replications in which the anchor specification test rejects at `alpha`.
pub fn spec_test_rejection_rate(
    dgp: &DgpConfig,
    query: &TransportQuery,
    nuisance: &NuisanceConfig,
    reps: usize,
    master_seed: u64,
    alpha: f64,
) -> Result<RejectionRate> {
    dgp.validate()?;
    let p_values: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = substream_seed(master_seed, r as u64);
            let ds = draw_dataset::<f64>(&DgpConfig { seed, ..dgp.clone() }).ok()?;
            let nu = fit_cross_fitted(
                &ds,
                &NuisanceConfig {
                    seed: splitmix64(seed),
                    ..nuisance.clone()
                },
            )
            .ok()?;
            estimate_tate(&ds, &nu, query, &EstimationOptions::with_alpha(alpha))
                .ok()?
                .p_value()
        })
        .collect();
    let valid: Vec<f64> = p_values.iter().flatten().copied().collect();
    let rejections = valid.iter().filter(|&&p| p < alpha).count();
    Ok(RejectionRate {
        rate: rejections as f64 / valid.len().max(1) as f64,
        rejections,
        valid: valid.len(),
        failures: reps - valid.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modifier_hand_values() {
        assert_eq!(lambda_modifier(0, 0.3), 1.0);
        assert!((lambda_modifier(3, 0.3) - 1.3).abs() < 1e-15);
        assert!((lambda_modifier(9, 0.3) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn modifier_is_periodic() {
        for t in -24..=24 {
            assert!((lambda_modifier(t + 12, 0.3) - lambda_modifier(t, 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn response_hand_values() {
        assert_eq!(theta_response(TreatmentId(0), &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(theta_response(TreatmentId(1), &[0.0, 0.0]).unwrap(), 3.0);
        assert!((theta_response(TreatmentId(2), &[1.0, 1.0]).unwrap() - 3.6).abs() < 1e-12);
        assert!(theta_response(TreatmentId(7), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn truth_hand_values() {
        let c = DgpConfig::default();
        assert!((true_tate(&c, TrialId(1), 6, 6).unwrap() - 0.77).abs() < 1e-12);
        assert!((true_tate(&c, TrialId(1), 0, 0).unwrap() - 1.43).abs() < 1e-12);
        assert!((true_tate(&c, TrialId(1), 12, 12).unwrap() - 1.43).abs() < 1e-12);
        let violated = DgpConfig {
            violation_kappa: 0.1,
            ..c
        };
        assert!(matches!(
            true_tate(&violated, TrialId(1), 6, 6),
            Err(TateError::Unsupported(_))
        ));
    }

    #[test]
    fn noiseless_unit_outcome() {
        let ds: Dataset<f64> = draw_dataset(&DgpConfig {
            noise_sd: 0.0,
            seed: 3,
            ..DgpConfig::default()
        })
        .unwrap();
        for o in ds.observations.iter().filter(|o| o.s == TrialId(1)) {
            let expected = theta_response(o.a, &o.x).unwrap() * 1.3;
            assert!((o.y - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn draws_are_reproducible_with_equal_trials() {
        let c = DgpConfig {
            seed: 11,
            ..DgpConfig::default()
        };
        let a: Dataset<f64> = draw_dataset(&c).unwrap();
        let b: Dataset<f64> = draw_dataset(&c).unwrap();
        assert_eq!(a, b);
        for k in 1..=6 {
            assert_eq!(a.trial_size(TrialId(k)), 200);
        }
    }

    #[test]
    fn balanced_draw_has_exact_moments() {
        let ds: Dataset<f64> = draw_dataset(&DgpConfig {
            balanced_covariates: true,
            seed: 5,
            ..DgpConfig::default()
        })
        .unwrap();
        for k in 1..=6 {
            let rows: Vec<_> = ds.observations.iter().filter(|o| o.s == TrialId(k)).collect();
            let m1: f64 = rows.iter().map(|o| o.x[0]).sum::<f64>();
            let m2: f64 = rows.iter().map(|o| o.x[1]).sum::<f64>() / rows.len() as f64;
            assert!(m1.abs() < 1e-9);
            assert_eq!(m2, 0.5);
            assert_eq!(ds.cell_size(TrialId(k), ds.trials[&TrialId(k)].arm_a), 100);
        }
    }

    #[test]
    fn substreams_differ() {
        assert_ne!(substream_seed(42, 0), substream_seed(42, 1));
        assert_ne!(substream_seed(42, 0), substream_seed(43, 0));
    }

    #[test]
    fn exact_estimates_have_zero_error() {
        let draws = vec![
            Draw::Estimate {
                psi: 0.77,
                se: 0.1,
                ci: (0.6, 0.9)
            };
            5
        ];
        let m = summarize(EstimatorKind::S1, 1200, 0.77, draws.iter());
        assert_eq!((m.bias, m.rmse, m.coverage), (0.0, 0.0, 1.0));
    }
}
