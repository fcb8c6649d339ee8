//! Targeted minimum loss estimation: per-cell (factorized) and joint
//! fluctuation of the outcome regressions along the clever covariate.

use std::collections::BTreeMap;

use crate::dr::{dr_score_mean, MeanEstimator};
use crate::error::{Result, TateError};
use crate::model::{Dataset, Observation, TransportQuery, TreatmentId, TrialId};
use crate::nuisance::{expit, logit, Nuisance};
use crate::scalar::{mean, Scalar};
use crate::transport::{estimate_tate, Cell, EstimationOptions, TateResult};

/// Initial predictions are clipped into `[b, 1 − b]` before the logit.
pub const LOGISTIC_CLIP: f64 = 0.005;
pub const JOINT_TOLERANCE: f64 = 1e-8;
pub const JOINT_MAX_ITER: usize = 100;
/// Tolerance on the weighted residual `ΣH(Y − μ̂*)` per cell.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Link {
    #[default]
    Linear,
    /// For outcomes in `[0, 1]`.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TmleVariant {
    #[default]
    Factorized,
    Joint,
}

/// One fitted fluctuation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Fluctuation<T> {
    pub epsilon: T,
    pub link: Link,
    pub target_cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmleReport<T> {
    /// Per-cell fluctuations (factorized) or per-iteration shared steps (joint).
    pub fluctuations: Vec<Fluctuation<T>>,
    pub iterations: usize,
    /// `ΣH(Y − μ̂*)` per targeted cell after targeting.
    pub weighted_residuals: BTreeMap<Cell, T>,
    /// `|P_n[φ̂_ψ]|` of the assembled influence function after targeting.
    pub eif_mean: T,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct CellUpdate<T> {
    /// Constant added on the link scale.
    shift: T,
    /// Coefficient of `1/(π̂ ê)` added on the link scale.
    coef: T,
}

/// Outcome regressions fluctuated on selected cells; `π̂` and `ê` pass through.
pub struct Targeted<T, N> {
    inner: N,
    link: Link,
    cells: BTreeMap<Cell, CellUpdate<T>>,
}

impl<T: Scalar, N: Nuisance<T>> Targeted<T, N> {
    pub fn new(inner: N, link: Link) -> Self {
        Self {
            inner,
            link,
            cells: BTreeMap::new(),
        }
    }

    pub fn inner(&self) -> &N {
        &self.inner
    }

    pub fn link(&self) -> Link {
        self.link
    }

    fn inverse_weight(&self, i: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T {
        T::one() / (self.inner.pi(i, obs, k) * self.inner.e(i, obs, k, a))
    }

    fn initial_link(&self, i: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T {
        let mu = self.inner.mu(i, obs, a, k);
        match self.link {
            Link::Linear => mu,
            Link::Logistic => {
                let b = T::of(LOGISTIC_CLIP);
                logit(mu.max(b).min(T::one() - b))
            }
        }
    }
}

impl<T: Scalar, N: Nuisance<T>> Nuisance<T> for Targeted<T, N> {
    fn pi(&self, i: usize, obs: &Observation<T>, k: TrialId) -> T {
        self.inner.pi(i, obs, k)
    }
    fn e(&self, i: usize, obs: &Observation<T>, k: TrialId, a: TreatmentId) -> T {
        self.inner.e(i, obs, k, a)
    }
    fn mu(&self, i: usize, obs: &Observation<T>, a: TreatmentId, k: TrialId) -> T {
        let Some(u) = self.cells.get(&(a, k)) else {
            return self.inner.mu(i, obs, a, k);
        };
        let mut eta = self.initial_link(i, obs, a, k) + u.shift;
        if u.coef != T::zero() {
            eta = eta + u.coef * self.inverse_weight(i, obs, a, k);
        }
        match self.link {
            Link::Linear => eta,
            Link::Logistic => expit(eta),
        }
    }
}

/// `H = 1[S=k]·1[A=a] / (π̂_k ê_k(a))`.
pub fn clever_covariate<T: Scalar, N: Nuisance<T>>(
    i: usize,
    obs: &Observation<T>,
    nuisance: &N,
    a: TreatmentId,
    k: TrialId,
) -> T {
    if obs.s != k || obs.a != a {
        return T::zero();
    }
    T::one() / (nuisance.pi(i, obs, k) * nuisance.e(i, obs, k, a))
}

/// `ΣH(Y − μ̂)` over the rows of cell `(a, k)`.
pub fn weighted_residual<T: Scalar, N: Nuisance<T>>(dataset: &Dataset<T>, nuisance: &N, cell: Cell) -> T {
    let (a, k) = cell;
    dataset
        .observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.s == k && o.a == a)
        .map(|(i, o)| clever_covariate(i, o, nuisance, a, k) * (o.y - nuisance.mu(i, o, a, k)))
        .sum()
}

fn cell_rows<T: Scalar>(dataset: &Dataset<T>, cell: Cell) -> Vec<usize> {
    let (a, k) = cell;
    (0..dataset.n())
        .filter(|&i| dataset.observations[i].s == k && dataset.observations[i].a == a)
        .collect()
}

fn check_unit_outcomes<T: Scalar>(dataset: &Dataset<T>, rows: &[usize]) -> Result<()> {
    match rows
        .iter()
        .find(|&&i| !(dataset.observations[i].y >= T::zero() && dataset.observations[i].y <= T::one()))
    {
        Some(&i) => Err(TateError::Config(format!(
            "logistic fluctuation needs outcomes in [0, 1]; observation {i} has y = {}",
            dataset.observations[i].y
        ))),
        None => Ok(()),
    }
}

/// Offset logistic fit of `y` on the single covariate `x` by damped scalar
/// Newton steps, run until `Σ x (y − expit(offset + εx))` vanishes to rounding.
fn offset_logistic_epsilon<T: Scalar>(x: &[T], y: &[T], offset: &[T]) -> (T, bool) {
    let loglik = |eps: T| -> T {
        x.iter()
            .zip(y)
            .zip(offset)
            .map(|((&xi, &yi), &oi)| {
                let eta = oi + eps * xi;
                let softplus = if eta > T::zero() {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                };
                yi * eta - softplus
            })
            .sum()
    };
    let score_at = |eps: T| -> T {
        (0..x.len())
            .map(|i| x[i] * (y[i] - expit(offset[i] + eps * x[i])))
            .sum()
    };
    let scale: T = x.iter().map(|v| v.abs()).sum::<T>().max(T::one());
    let tol = T::of(1e-12) * scale;
    let mut eps = T::zero();
    let mut current = loglik(eps);
    for _ in 0..200 {
        let (mut score, mut info) = (T::zero(), T::zero());
        for i in 0..x.len() {
            let p = expit(offset[i] + eps * x[i]);
            score = score + x[i] * (y[i] - p);
            info = info + x[i] * x[i] * p * (T::one() - p);
        }
        if score.abs() <= tol {
            return (eps, true);
        }
        if !(info > T::zero()) {
            return (eps, false);
        }
        let mut step = score / info;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = eps + step;
            let value = loglik(candidate);
            // near the optimum the likelihood is flat to rounding, so a step
            // that shrinks the score is accepted as well
            let improves = value >= current || score_at(candidate).abs() < score.abs();
            if value.is_finite() && improves {
                eps = candidate;
                current = value;
                accepted = true;
                break;
            }
            step = step / T::of(2.0);
        }
        if !accepted {
            return (eps, score.abs() <= T::of(1e-8));
        }
    }
    (eps, false)
}

/// Per-cell linear fluctuation `μ̂* = μ̂ + ε̂`, `ε̂ = ΣH(Y − μ̂)/ΣH`.
pub fn factorized_tmle_linear<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: N,
    cells: &[Cell],
) -> Result<(Targeted<T, N>, TmleReport<T>)> {
    let mut targeted = Targeted::new(nuisance, Link::Linear);
    let mut fluctuations = Vec::new();
    for &cell in cells {
        let (a, k) = cell;
        let mut num = T::zero();
        let mut den = T::zero();
        for i in cell_rows(dataset, cell) {
            let o = &dataset.observations[i];
            let h = clever_covariate(i, o, &targeted, a, k);
            num = num + h * (o.y - targeted.mu(i, o, a, k));
            den = den + h;
        }
        if den == T::zero() {
            return Err(TateError::EmptyCell { trial: k, arm: a });
        }
        let eps = num / den;
        let entry = targeted.cells.entry(cell).or_default();
        entry.shift = entry.shift + eps;
        fluctuations.push(Fluctuation {
            epsilon: eps,
            link: Link::Linear,
            target_cells: vec![cell],
        });
    }
    let report = factorized_report(dataset, &targeted, cells, fluctuations, Vec::new(), true);
    Ok((targeted, report))
}

/// Per-cell logistic fluctuation `logit μ̂* = logit μ̂ + ε̂·H` with `ε̂`
/// from an offset logistic regression on the cell's rows.
pub fn factorized_tmle_logistic<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: N,
    cells: &[Cell],
) -> Result<(Targeted<T, N>, TmleReport<T>)> {
    let mut targeted = Targeted::new(nuisance, Link::Logistic);
    let mut fluctuations = Vec::new();
    let mut warnings = Vec::new();
    let mut all_converged = true;
    for &cell in cells {
        let (a, k) = cell;
        let rows = cell_rows(dataset, cell);
        if rows.is_empty() {
            return Err(TateError::EmptyCell { trial: k, arm: a });
        }
        check_unit_outcomes(dataset, &rows)?;
        let mut x = Vec::with_capacity(rows.len());
        let mut y = Vec::with_capacity(rows.len());
        let mut offset = Vec::with_capacity(rows.len());
        for &i in &rows {
            let o = &dataset.observations[i];
            x.push(clever_covariate(i, o, &targeted, a, k));
            y.push(o.y);
            offset.push(targeted.initial_link(i, o, a, k));
        }
        let (eps, converged) = offset_logistic_epsilon(&x, &y, &offset);
        if !converged {
            all_converged = false;
            warnings.push(format!(
                "logistic fluctuation for (arm {a}, trial {k}) did not converge"
            ));
        }
        let entry = targeted.cells.entry(cell).or_default();
        entry.coef = entry.coef + eps;
        fluctuations.push(Fluctuation {
            epsilon: eps,
            link: Link::Logistic,
            target_cells: vec![cell],
        });
    }
    let report = factorized_report(dataset, &targeted, cells, fluctuations, warnings, all_converged);
    Ok((targeted, report))
}

fn factorized_report<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    targeted: &Targeted<T, N>,
    cells: &[Cell],
    fluctuations: Vec<Fluctuation<T>>,
    warnings: Vec<String>,
    fits_converged: bool,
) -> TmleReport<T> {
    let weighted_residuals: BTreeMap<Cell, T> = cells
        .iter()
        .map(|&c| (c, weighted_residual(dataset, targeted, c)))
        .collect();
    let converged = fits_converged && weighted_residuals.values().all(|r| r.abs() < T::of(RESIDUAL_TOLERANCE));
    TmleReport {
        fluctuations,
        iterations: 1,
        weighted_residuals,
        eif_mean: T::zero(),
        converged,
        warnings,
    }
}

/// Targeted estimate of the query. Factorized targeting fluctuates every
/// marginal mean the estimator uses, then plugs the targeted means into the
/// estimator. The joint variant fluctuates all cells with one shared `ε`
/// along `ω_c·H_c`, where `ω_c = ∂ψ/∂μ̄_c` is recomputed every iteration,
/// until `|ε̂| < 1e-8`; anchor weights stay at their initial estimate.
pub fn estimate_tate_tmle<T: Scalar, N: Nuisance<T>>(
    dataset: &Dataset<T>,
    nuisance: N,
    query: &TransportQuery,
    variant: TmleVariant,
    link: Link,
    options: &EstimationOptions<T>,
) -> Result<(TateResult<T>, TmleReport<T>)> {
    let initial = estimate_tate(dataset, &nuisance, query, options)?;
    let cells: Vec<Cell> = initial.cell_gradient.keys().copied().collect();
    let mut plug_in = EstimationOptions {
        mean_estimator: MeanEstimator::PlugIn,
        ..options.clone()
    };
    match variant {
        TmleVariant::Factorized => {
            let (targeted, mut report) = match link {
                Link::Linear => factorized_tmle_linear(dataset, nuisance, &cells)?,
                Link::Logistic => factorized_tmle_logistic(dataset, nuisance, &cells)?,
            };
            let mut result = estimate_tate(dataset, &targeted, query, &plug_in)?;
            report.eif_mean = mean(&result.if_values).abs();
            result.warnings.extend(report.warnings.iter().cloned());
            Ok((result, report))
        }
        TmleVariant::Joint => {
            if !initial.weights.is_empty() {
                plug_in.fixed_weights = Some(initial.weights.clone());
            }
            let rows: Vec<(usize, Cell)> = dataset
                .observations
                .iter()
                .enumerate()
                .filter(|(_, o)| initial.cell_gradient.contains_key(&(o.a, o.s)))
                .map(|(i, o)| (i, (o.a, o.s)))
                .collect();
            if link == Link::Logistic {
                check_unit_outcomes(dataset, &rows.iter().map(|r| r.0).collect::<Vec<_>>())?;
            }
            let mut targeted = Targeted::new(nuisance, link);
            for &c in &cells {
                targeted.cells.insert(c, CellUpdate::default());
            }
            let mut fluctuations = Vec::new();
            let mut warnings = Vec::new();
            let mut converged = false;
            let mut result = estimate_tate(dataset, &targeted, query, &plug_in)?;
            for _ in 0..JOINT_MAX_ITER {
                let omega = &result.cell_gradient;
                let mut x = Vec::with_capacity(rows.len());
                let mut y = Vec::with_capacity(rows.len());
                let mut current = Vec::with_capacity(rows.len());
                for &(i, (a, k)) in &rows {
                    let o = &dataset.observations[i];
                    let w = omega.get(&(a, k)).copied().unwrap_or(T::zero());
                    x.push(w * clever_covariate(i, o, &targeted, a, k));
                    y.push(o.y);
                    current.push(targeted.mu(i, o, a, k));
                }
                let eps = match link {
                    Link::Linear => {
                        let sxx: T = x.iter().map(|&v| v * v).sum();
                        if sxx == T::zero() {
                            T::zero()
                        } else {
                            x.iter()
                                .zip(y.iter().zip(&current))
                                .map(|(&xi, (&yi, &mi))| xi * (yi - mi))
                                .sum::<T>()
                                / sxx
                        }
                    }
                    Link::Logistic => {
                        let offset: Vec<T> = current.iter().map(|&m| logit(m)).collect();
                        let (eps, ok) = offset_logistic_epsilon(&x, &y, &offset);
                        if !ok {
                            warnings.push("joint logistic fluctuation did not converge".to_string());
                        }
                        eps
                    }
                };
                if !eps.is_finite() {
                    warnings.push("joint fluctuation produced a non-finite step".to_string());
                    break;
                }
                fluctuations.push(Fluctuation {
                    epsilon: eps,
                    link,
                    target_cells: cells.clone(),
                });
                if eps.abs() < T::of(JOINT_TOLERANCE) {
                    converged = true;
                    break;
                }
                for (cell, &w) in omega {
                    let u = targeted.cells.entry(*cell).or_default();
                    u.coef = u.coef + eps * w;
                }
                result = estimate_tate(dataset, &targeted, query, &plug_in)?;
            }
            if !converged {
                warnings.push(format!(
                    "joint targeting did not converge in {JOINT_MAX_ITER} iterations"
                ));
            }
            let weighted_residuals = cells
                .iter()
                .map(|&c| (c, weighted_residual(dataset, &targeted, c)))
                .collect();
            let report = TmleReport {
                iterations: fluctuations.len(),
                fluctuations,
                weighted_residuals,
                eif_mean: mean(&result.if_values).abs(),
                converged,
                warnings,
            };
            result.warnings.extend(report.warnings.iter().cloned());
            Ok((result, report))
        }
    }
}

/// Sample mean of the doubly robust score for one cell under `nuisance`.
pub fn cell_score_mean<T: Scalar, N: Nuisance<T>>(dataset: &Dataset<T>, nuisance: &N, cell: Cell) -> T {
    let (a, k) = cell;
    let scores: Vec<T> = dataset
        .observations
        .iter()
        .enumerate()
        .map(|(i, o)| dr_score_mean(i, o, nuisance, a, k))
        .collect();
    mean(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrialSpec;

    struct Fixed(Vec<f64>);

    impl Nuisance<f64> for Fixed {
        fn pi(&self, _: usize, _: &Observation<f64>, _: TrialId) -> f64 {
            1.0
        }
        fn e(&self, _: usize, _: &Observation<f64>, _: TrialId, _: TreatmentId) -> f64 {
            0.5
        }
        fn mu(&self, i: usize, _: &Observation<f64>, _: TreatmentId, _: TrialId) -> f64 {
            self.0[i]
        }
    }

    fn dataset(ys: &[f64], arms: &[u32]) -> Dataset<f64> {
        let spec = TrialSpec {
            trial_id: TrialId(1),
            arm_a: TreatmentId(1),
            arm_b: TreatmentId(0),
            t0: 0,
            t1: 0,
            p_arm_a: 0.5,
        };
        let obs = ys
            .iter()
            .zip(arms)
            .map(|(&y, &a)| Observation {
                y,
                a: TreatmentId(a),
                s: TrialId(1),
                x: vec![],
            })
            .collect();
        Dataset::new(vec![spec], obs, 0)
    }

    const CELL: Cell = (TreatmentId(1), TrialId(1));

    #[test]
    fn clever_covariate_values() {
        let o = Observation {
            y: 0.0,
            a: TreatmentId(1),
            s: TrialId(1),
            x: vec![],
        };
        struct Half;
        impl Nuisance<f64> for Half {
            fn pi(&self, _: usize, _: &Observation<f64>, _: TrialId) -> f64 {
                0.5
            }
            fn e(&self, _: usize, _: &Observation<f64>, _: TrialId, _: TreatmentId) -> f64 {
                0.5
            }
            fn mu(&self, _: usize, _: &Observation<f64>, _: TreatmentId, _: TrialId) -> f64 {
                0.0
            }
        }
        assert_eq!(clever_covariate(0, &o, &Half, TreatmentId(1), TrialId(1)), 4.0);
        assert_eq!(clever_covariate(0, &o, &Half, TreatmentId(0), TrialId(1)), 0.0);
        assert_eq!(clever_covariate(0, &o, &Half, TreatmentId(1), TrialId(2)), 0.0);
    }

    #[test]
    fn balanced_residuals_need_no_fluctuation() {
        let ds = dataset(&[1.5, 0.5, 9.0], &[1, 1, 0]);
        let (_, report) = factorized_tmle_linear(&ds, Fixed(vec![1.0, 1.0, 0.0]), &[CELL]).unwrap();
        assert_eq!(report.fluctuations[0].epsilon, 0.0);
    }

    #[test]
    fn linear_epsilon_closed_form() {
        // H = (2, 2) on the cell, residuals (1, 1) → ε = 4/4 = 1
        let ds = dataset(&[2.0, 3.0, 0.0], &[1, 1, 0]);
        let (targeted, report) = factorized_tmle_linear(&ds, Fixed(vec![1.0, 2.0, 0.0]), &[CELL]).unwrap();
        assert!((report.fluctuations[0].epsilon - 1.0).abs() < 1e-15);
        assert!(weighted_residual(&ds, &targeted, CELL).abs() < 1e-12);
        assert!(report.converged);
    }

    #[test]
    fn linear_targeting_is_idempotent() {
        let ds = dataset(&[2.0, 3.5, -1.0, 0.2], &[1, 1, 1, 0]);
        let (once, _) = factorized_tmle_linear(&ds, Fixed(vec![0.3, 0.1, 0.9, 0.0]), &[CELL]).unwrap();
        let (_, second) = factorized_tmle_linear(&ds, &once, &[CELL]).unwrap();
        assert!(second.fluctuations[0].epsilon.abs() < 1e-10);
    }

    #[test]
    fn logistic_targeting_solves_score_and_stays_in_range() {
        let ds = dataset(&[1.0, 0.0, 1.0, 1.0, 0.0], &[1, 1, 1, 1, 0]);
        let (targeted, report) =
            factorized_tmle_logistic(&ds, Fixed(vec![0.2, 0.5, 0.999, 0.7, 0.0]), &[CELL]).unwrap();
        assert!(report.converged);
        assert!(weighted_residual(&ds, &targeted, CELL).abs() < 1e-8);
        for (i, o) in ds.observations.iter().enumerate() {
            let m = targeted.mu(i, o, TreatmentId(1), TrialId(1));
            assert!(m > 0.0 && m < 1.0);
        }
    }

    #[test]
    fn logistic_rejects_unbounded_outcomes() {
        let ds = dataset(&[2.0, 0.0], &[1, 0]);
        assert!(factorized_tmle_logistic(&ds, Fixed(vec![0.5, 0.5]), &[CELL]).is_err());
    }
}
