//! Transported effects for both identification strategies, the
//! inverse-variance combination of common-arm anchors, Wald inference and the
//! anchor specification test.
//!
//! Every estimator is a smooth function of arm-by-trial marginal means
//! `μ̄_{a,k}`. Its influence function is assembled as `Σ_c ω_c φ_c`, where
//! `ω_c = ∂ψ/∂μ̄_c` is recorded in [`TateResult::cell_gradient`].

use std::collections::BTreeMap;

use crate::dr::{difference, estimate_marginal_mean_with, EstimateWithIF, InfluenceForm, MeanEstimator};
use crate::error::{Result, TateError};
use crate::linalg::{cholesky, cholesky_solve, condition_number, Matrix};
use crate::model::{validate_query, CommonArmAnchor, Dataset, Strategy, TransportQuery, TreatmentId, TrialId};
use crate::nuisance::Nuisance;
use crate::scalar::{mean, Scalar};
use crate::stats::{chi2_sf, normal_quantile};

/// `(arm, trial)` identifying a marginal mean `μ̄_{a,k}`.
pub type Cell = (TreatmentId, TrialId);

pub const DEFAULT_ALPHA: f64 = 0.05;
/// Condition number above which covariance solves are ridge-regularized.
pub const MAX_CONDITION: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TateResult<T> {
    pub psi: T,
    pub std_error: T,
    pub ci_low: T,
    pub ci_high: T,
    /// Temporal ratio: `R₁`, `R₂`, or the combined `R₂*`.
    pub ratio: T,
    pub components: BTreeMap<String, EstimateWithIF<T>>,
    pub if_values: Vec<T>,
    pub warnings: Vec<String>,
    /// `∂ψ/∂μ̄_c` for every marginal mean entering the estimate.
    pub cell_gradient: BTreeMap<Cell, T>,
    /// Anchor weights (common-arm strategy only).
    pub weights: Vec<T>,
    pub spec_test: Option<SpecTest<T>>,
    /// Standard error from the component-variance sum, ignoring cross-covariances.
    /// Diagnostic only; inference uses the assembled influence function.
    pub closed_form_se: T,
}

impl<T: Scalar> TateResult<T> {
    pub fn p_value(&self) -> Option<T> {
        self.spec_test.as_ref().map(|t| t.p_value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationOptions<T> {
    pub alpha: T,
    pub mean_estimator: MeanEstimator,
    pub influence: InfluenceForm,
    /// Anchor weights to use instead of the estimated optimal ones.
    pub fixed_weights: Option<Vec<T>>,
    pub contrast: Contrast<T>,
}

impl<T: Scalar> Default for EstimationOptions<T> {
    fn default() -> Self {
        Self {
            alpha: T::of(DEFAULT_ALPHA),
            mean_estimator: MeanEstimator::DoublyRobust,
            influence: InfluenceForm::default(),
            fixed_weights: None,
            contrast: Contrast::SuccessiveDifferences,
        }
    }
}

impl<T: Scalar> EstimationOptions<T> {
    pub fn with_alpha(alpha: T) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }
}

/// Anchor-specific temporal ratios with their joint influence functions.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRatioSet<T> {
    pub anchors: Vec<CommonArmAnchor>,
    pub ratios: Vec<T>,
    pub numerators: Vec<EstimateWithIF<T>>,
    pub denominators: Vec<EstimateWithIF<T>>,
    /// `n × m`; column `j` holds the influence values of ratio `j`.
    pub if_matrix: Matrix<T>,
    /// `P_n[φ_R φ_Rᵀ]`.
    pub cov: Matrix<T>,
    pub n: usize,
}

impl<T: Scalar> AnchorRatioSet<T> {
    pub fn m(&self) -> usize {
        self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalWeights<T> {
    pub weights: Vec<T>,
    /// Ridge added to the diagonal; zero when the covariance was well conditioned.
    pub ridge: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Contrast<T> {
    /// Rows `e_j − e_{j+1}`.
    SuccessiveDifferences,
    /// Rows `e_1 − e_{j+1}`.
    AgainstFirst,
    /// Any `(m−1) × m` matrix of full row rank annihilating `1`.
    Custom(Matrix<T>),
}

impl<T: Scalar> Contrast<T> {
    pub fn matrix(&self, m: usize) -> Matrix<T> {
        let rows = m.saturating_sub(1);
        match self {
            Contrast::SuccessiveDifferences => Matrix::from_fn(rows, m, |r, c| {
                if c == r {
                    T::one()
                } else if c == r + 1 {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Contrast::AgainstFirst => Matrix::from_fn(rows, m, |r, c| {
                if c == 0 {
                    T::one()
                } else if c == r + 1 {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Contrast::Custom(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecTest<T> {
    pub q: T,
    pub df: usize,
    pub p_value: T,
    pub ridge: T,
    pub warnings: Vec<String>,
}

/// `ψ ± z_{1−α/2}·SE`.
pub fn assemble_wald_ci<T: Scalar>(psi: T, std_error: T, alpha: T) -> (T, T) {
    let z = normal_quantile(T::one() - alpha / T::of(2.0));
    (psi - z * std_error, psi + z * std_error)
}

fn check_denominator<T: Scalar>(est: &EstimateWithIF<T>, what: String, requirement: &'static str) -> Result<()> {
    let se = est.std_error();
    if est.value == T::zero() || est.value.abs() < T::of(2.0) * se {
        return Err(TateError::Degenerate {
            what,
            value: est.value.as_f64(),
            se: se.as_f64(),
            requirement,
        });
    }
    Ok(())
}

const REPLICATED_REQUIREMENT: &str = "a nonzero effect in the source-time replicate trial";
const COMMON_ARM_REQUIREMENT: &str = "a nonzero anchor-arm mean at the source measurement time";

/// Memoized marginal means for one (dataset, nuisance, estimator) triple.
struct Blocks<'a, T, N> {
    dataset: &'a Dataset<T>,
    nuisance: &'a N,
    estimator: MeanEstimator,
    form: InfluenceForm,
    cache: BTreeMap<Cell, EstimateWithIF<T>>,
}

impl<'a, T: Scalar, N: Nuisance<T>> Blocks<'a, T, N> {
    fn new(dataset: &'a Dataset<T>, nuisance: &'a N, estimator: MeanEstimator, form: InfluenceForm) -> Self {
        Self {
            dataset,
            nuisance,
            estimator,
            form,
            cache: BTreeMap::new(),
        }
    }

    fn mean(&mut self, a: TreatmentId, k: TrialId) -> Result<EstimateWithIF<T>> {
        if let Some(e) = self.cache.get(&(a, k)) {
            return Ok(e.clone());
        }
        let e = estimate_marginal_mean_with(self.dataset, self.nuisance, a, k, self.estimator, self.form)?;
        self.cache.insert((a, k), e.clone());
        Ok(e)
    }

    fn ate(&mut self, k: TrialId) -> Result<(EstimateWithIF<T>, Cell, Cell)> {
        let spec = self
            .dataset
            .trial(k)
            .ok_or_else(|| TateError::InvalidQuery(vec![format!("unknown trial {k}")]))?;
        let (a, b) = (spec.arm_a, spec.arm_b);
        let ta = self.mean(a, k)?;
        let tb = self.mean(b, k)?;
        Ok((difference(&ta, &tb), (a, k), (b, k)))
    }

    fn assemble(&self, gradient: &BTreeMap<Cell, T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.dataset.n()];
        for (cell, &w) in gradient {
            for (o, &f) in out.iter_mut().zip(&self.cache[cell].if_values) {
                *o = *o + w * f;
            }
        }
        out
    }
}

fn add_to<T: Scalar>(gradient: &mut BTreeMap<Cell, T>, cell: Cell, w: T) {
    let e = gradient.entry(cell).or_insert(T::zero());
    *e = *e + w;
}

fn ensure_valid<T: Scalar>(dataset: &Dataset<T>, query: &TransportQuery) -> Result<()> {
    let v = validate_query(dataset, query);
    if v.is_empty() {
        Ok(())
    } else {
        Err(TateError::InvalidQuery(v.iter().map(ToString::to_string).collect()))
    }
}

#[allow(clippy::too_many_arguments)]
fn finish<T: Scalar, N: Nuisance<T>>(
    blocks: &Blocks<'_, T, N>,
    psi: T,
    ratio: T,
    gradient: BTreeMap<Cell, T>,
    components: BTreeMap<String, EstimateWithIF<T>>,
    closed_form_var: T,
    alpha: T,
    warnings: Vec<String>,
) -> TateResult<T> {
    let if_values = blocks.assemble(&gradient);
    let n = blocks.dataset.n();
    let est = EstimateWithIF {
        value: psi,
        if_values,
        n,
    };
    let std_error = est.std_error();
    let (ci_low, ci_high) = assemble_wald_ci(psi, std_error, alpha);
    TateResult {
        psi,
        std_error,
        ci_low,
        ci_high,
        ratio,
        components,
        if_values: est.if_values,
        warnings,
        cell_gradient: gradient,
        weights: Vec::new(),
        spec_test: None,
        closed_form_se: (closed_form_var / T::of_usize(n)).sqrt(),
    }
}

/// Dispatches on the query's strategy: replicated trials, a single common
/// arm, or several common arms combined with optimal weights.
pub fn estimate_tate<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    query: &TransportQuery,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    match &query.strategy {
        Strategy::Replicated { .. } => strategy1(dataset, nuisance, query, options),
        Strategy::CommonArm { .. } => common_arm(dataset, nuisance, query, options),
    }
}

/// `ψ̂₁ = τ̂_{k*}·τ̂_j/τ̂_{j'}`.
pub fn estimate_tate_strategy1<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    query: &TransportQuery,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    if !matches!(query.strategy, Strategy::Replicated { .. }) {
        return Err(TateError::Config("strategy 1 needs replicated anchor trials".into()));
    }
    strategy1(dataset, nuisance, query, options)
}

/// `ψ̂₂ = τ̂_{k*}·μ̄̂_{c,ℓ}/μ̄̂_{c,ℓ'}` for a single common-arm anchor.
pub fn estimate_tate_strategy2<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    query: &TransportQuery,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    match &query.strategy {
        Strategy::CommonArm { anchors } if anchors.len() == 1 => {}
        _ => {
            return Err(TateError::Config(
                "strategy 2 needs exactly one common-arm anchor".into(),
            ))
        }
    }
    common_arm(dataset, nuisance, query, options)
}

/// `ψ̂₂* = τ̂_{k*}·w*ᵀR̂` over all listed common-arm anchors.
pub fn estimate_tate_multi_anchor<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    query: &TransportQuery,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    if !matches!(query.strategy, Strategy::CommonArm { .. }) {
        return Err(TateError::Config(
            "multi-anchor estimation needs common-arm anchors".into(),
        ));
    }
    common_arm(dataset, nuisance, query, options)
}

fn strategy1<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    query: &TransportQuery,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    ensure_valid(dataset, query)?;
    let Strategy::Replicated {
        anchor_j,
        anchor_jprime,
    } = query.strategy
    else {
        unreachable!("checked by caller");
    };
    let mut blocks = Blocks::new(dataset, nuisance, options.mean_estimator, options.influence);
    let (tau_k, ka, kb) = blocks.ate(query.target_trial)?;
    let (tau_j, ja, jb) = blocks.ate(anchor_j)?;
    let (tau_jp, jpa, jpb) = blocks.ate(anchor_jprime)?;
    check_denominator(&tau_jp, format!("tau[{anchor_jprime}]"), REPLICATED_REQUIREMENT)?;

    let ratio = tau_j.value / tau_jp.value;
    let psi = tau_k.value * ratio;
    let (c_k, c_j, c_jp) = (ratio, tau_k.value / tau_jp.value, -psi / tau_jp.value);
    let mut gradient = BTreeMap::new();
    for (cells, c) in [((ka, kb), c_k), ((ja, jb), c_j), ((jpa, jpb), c_jp)] {
        add_to(&mut gradient, cells.0, c);
        add_to(&mut gradient, cells.1, -c);
    }
    let closed = c_k * c_k * tau_k.variance() + c_j * c_j * tau_j.variance() + c_jp * c_jp * tau_jp.variance();
    let mut components = BTreeMap::new();
    components.insert(format!("tau[{}]", query.target_trial), tau_k);
    components.insert(format!("tau[{anchor_j}]"), tau_j);
    components.insert(format!("tau[{anchor_jprime}]"), tau_jp);
    Ok(finish(
        &blocks,
        psi,
        ratio,
        gradient,
        components,
        closed,
        options.alpha,
        Vec::new(),
    ))
}

fn ratio_set<T: Scalar, N: Nuisance<T>>(
    blocks: &mut Blocks<'_, T, N>,
    anchors: &[CommonArmAnchor],
) -> Result<AnchorRatioSet<T>> {
    let n = blocks.dataset.n();
    let m = anchors.len();
    let mut ratios = Vec::with_capacity(m);
    let mut numerators = Vec::with_capacity(m);
    let mut denominators = Vec::with_capacity(m);
    let mut if_matrix = Matrix::zeros(n, m);
    for (j, anchor) in anchors.iter().enumerate() {
        let num = blocks.mean(anchor.arm, anchor.trial_at_target)?;
        let den = blocks.mean(anchor.arm, anchor.trial_at_source)?;
        check_denominator(
            &den,
            format!("mu[{},{}]", anchor.arm, anchor.trial_at_source),
            COMMON_ARM_REQUIREMENT,
        )?;
        let r = num.value / den.value;
        for i in 0..n {
            if_matrix[(i, j)] = (num.if_values[i] - r * den.if_values[i]) / den.value;
        }
        ratios.push(r);
        numerators.push(num);
        denominators.push(den);
    }
    let cov = Matrix::from_fn(m, m, |a, b| {
        (0..n).map(|i| if_matrix[(i, a)] * if_matrix[(i, b)]).sum::<T>() / T::of_usize(n)
    });
    Ok(AnchorRatioSet {
        anchors: anchors.to_vec(),
        ratios,
        numerators,
        denominators,
        if_matrix,
        cov,
        n,
    })
}

/// Ratios `μ̄̂_{c,ℓ}/μ̄̂_{c,ℓ'}` for each anchor with their influence-function covariance.
pub fn anchor_ratios<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    anchors: &[CommonArmAnchor],
    form: InfluenceForm,
) -> Result<AnchorRatioSet<T>> {
    let mut blocks = Blocks::new(dataset, nuisance, MeanEstimator::DoublyRobust, form);
    ratio_set(&mut blocks, anchors)
}

fn regularized_cholesky<T: Scalar>(a: &Matrix<T>) -> (Matrix<T>, T) {
    let m = a.rows();
    let well_conditioned = |a: &Matrix<T>| condition_number(a) <= T::of(MAX_CONDITION);
    if let Some(l) = cholesky(a).filter(|_| well_conditioned(a)) {
        return (l, T::zero());
    }
    let trace = a.trace();
    let mut lambda = T::of(RIDGE_SCALE) * trace / T::of_usize(m.max(1));
    if lambda <= T::zero() {
        lambda = T::min_positive_value().sqrt();
    }
    loop {
        let mut r = a.clone();
        r.add_ridge(lambda);
        if let Some(l) = cholesky(&r) {
            return (l, lambda);
        }
        lambda = lambda * T::of(10.0);
    }
}

/// Minimum-variance weights `V⁻¹1 / 1ᵀV⁻¹1`, with a ridge of
/// `1e-8·trace/m` when `V` is near-singular.
pub fn optimal_weights<T: Scalar>(cov: &Matrix<T>) -> OptimalWeights<T> {
    let m = cov.rows();
    if m == 1 {
        return OptimalWeights {
            weights: vec![T::one()],
            ridge: T::zero(),
        };
    }
    let (l, ridge) = regularized_cholesky(cov);
    let x = cholesky_solve(&l, &vec![T::one(); m]);
    let total: T = x.iter().copied().sum();
    OptimalWeights {
        weights: x.into_iter().map(|v| v / total).collect(),
        ridge,
    }
}

/// Wald test of equal anchor ratios: `Q = n·(CR)ᵀ(CVCᵀ)⁻¹(CR)` against `χ²_{m−1}`.
pub fn specification_test<T: Scalar>(set: &AnchorRatioSet<T>, contrast: &Contrast<T>) -> Result<SpecTest<T>> {
    let m = set.m();
    if m < 2 {
        return Err(TateError::Config(format!(
            "specification test needs at least 2 anchors, got {m}"
        )));
    }
    let c = contrast.matrix(m);
    if c.cols() != m || c.rows() == 0 {
        return Err(TateError::Config(format!(
            "contrast is {}x{}, expected (m-1)x{m}",
            c.rows(),
            c.cols()
        )));
    }
    let df = c.rows();
    let cr = c.matvec(&set.ratios);
    let mut warnings = Vec::new();
    if cr.iter().all(|&v| v == T::zero()) {
        return Ok(SpecTest {
            q: T::zero(),
            df,
            p_value: T::one(),
            ridge: T::zero(),
            warnings,
        });
    }
    let cvc = c.matmul(&set.cov).matmul(&c.transpose());
    if cvc.trace() <= T::zero() {
        warnings.push("contrast covariance is zero; rejecting with Q = inf".into());
        return Ok(SpecTest {
            q: T::infinity(),
            df,
            p_value: T::zero(),
            ridge: T::zero(),
            warnings,
        });
    }
    let (l, ridge) = regularized_cholesky(&cvc);
    if ridge > T::zero() {
        warnings.push(format!("contrast covariance near-singular; ridge {ridge} added"));
    }
    let sol = cholesky_solve(&l, &cr);
    let quad: T = cr.iter().zip(&sol).map(|(&a, &b)| a * b).sum();
    let q = (T::of_usize(set.n) * quad).max(T::zero());
    Ok(SpecTest {
        q,
        df,
        p_value: chi2_sf(q, df),
        ridge,
        warnings,
    })
}

fn common_arm<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: &N,
    query: &TransportQuery,
    options: &EstimationOptions<T>,
) -> Result<TateResult<T>> {
    ensure_valid(dataset, query)?;
    let Strategy::CommonArm { anchors } = &query.strategy else {
        unreachable!("checked by caller");
    };
    let mut blocks = Blocks::new(dataset, nuisance, options.mean_estimator, options.influence);
    let (tau, ka, kb) = blocks.ate(query.target_trial)?;
    let set = ratio_set(&mut blocks, anchors)?;
    let m = set.m();
    let mut warnings = Vec::new();
    let weights = match &options.fixed_weights {
        Some(w) if w.len() == m => w.clone(),
        Some(w) => {
            return Err(TateError::Config(format!("{} fixed weights for {m} anchors", w.len())));
        }
        None => {
            let ow = optimal_weights(&set.cov);
            if ow.ridge > T::zero() {
                warnings.push(format!("anchor covariance near-singular; ridge {} added", ow.ridge));
            }
            ow.weights
        }
    };
    let ratio: T = weights.iter().zip(&set.ratios).map(|(&w, &r)| w * r).sum();
    let psi = tau.value * ratio;

    let mut gradient = BTreeMap::new();
    add_to(&mut gradient, ka, ratio);
    add_to(&mut gradient, kb, -ratio);
    for (j, anchor) in anchors.iter().enumerate() {
        let den = set.denominators[j].value;
        add_to(
            &mut gradient,
            (anchor.arm, anchor.trial_at_target),
            tau.value * weights[j] / den,
        );
        add_to(
            &mut gradient,
            (anchor.arm, anchor.trial_at_source),
            -tau.value * weights[j] * set.ratios[j] / den,
        );
    }

    let wvw: T = (0..m)
        .flat_map(|a| (0..m).map(move |b| (a, b)))
        .map(|(a, b)| weights[a] * set.cov[(a, b)] * weights[b])
        .sum();
    let closed = ratio * ratio * tau.variance() + tau.value * tau.value * wvw;

    let spec_test = if m >= 2 {
        let t = specification_test(&set, &options.contrast)?;
        warnings.extend(t.warnings.iter().cloned());
        Some(t)
    } else {
        None
    };

    let mut components = BTreeMap::new();
    components.insert(format!("tau[{}]", query.target_trial), tau);
    for (j, anchor) in anchors.iter().enumerate() {
        components.insert(
            format!("mu[{},{}]", anchor.arm, anchor.trial_at_target),
            set.numerators[j].clone(),
        );
        components.insert(
            format!("mu[{},{}]", anchor.arm, anchor.trial_at_source),
            set.denominators[j].clone(),
        );
        let r_if: Vec<T> = (0..set.n).map(|i| set.if_matrix[(i, j)]).collect();
        components.insert(
            format!(
                "R[{},{}/{}]",
                anchor.arm, anchor.trial_at_target, anchor.trial_at_source
            ),
            EstimateWithIF {
                value: set.ratios[j],
                if_values: r_if,
                n: set.n,
            },
        );
    }
    let mut result = finish(
        &blocks,
        psi,
        ratio,
        gradient,
        components,
        closed,
        options.alpha,
        warnings,
    );
    result.weights = weights;
    result.spec_test = spec_test;
    Ok(result)
}

/// Relative gap between the closed-form and assembled standard errors.
pub fn closed_form_gap<T: Scalar>(result: &TateResult<T>) -> T {
    if result.std_error == T::zero() {
        return T::zero();
    }
    (result.closed_form_se - result.std_error).abs() / result.std_error
}

/// Mean of the assembled influence values (zero for doubly robust building blocks).
pub fn if_mean<T: Scalar>(result: &TateResult<T>) -> T {
    mean(&result.if_values)
}
