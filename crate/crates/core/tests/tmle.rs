use tate::dr::{estimate_marginal_mean, InfluenceForm};
use tate::model::Dataset;
use tate::nuisance::{fit_cross_fitted, Nuisance, NuisanceConfig, OutcomeModelKind};
use tate::simlab::{draw_dataset, DgpConfig, EstimatorKind};
use tate::tmle::{
    estimate_tate_tmle, factorized_tmle_linear, factorized_tmle_logistic, weighted_residual, Link, TmleVariant,
    JOINT_MAX_ITER,
};
use tate::transport::{estimate_tate, EstimationOptions};

fn continuous(seed: u64) -> Dataset<f64> {
    draw_dataset(&DgpConfig {
        seed,
        ..DgpConfig::default()
    })
    .unwrap()
}

/// The simulated outcome dichotomized at 2.5.
fn binary(seed: u64) -> Dataset<f64> {
    let mut ds = continuous(seed);
    for o in &mut ds.observations {
        o.y = if o.y > 2.5 { 1.0 } else { 0.0 };
    }
    ds
}

fn logistic_config() -> NuisanceConfig {
    NuisanceConfig {
        outcome_model: OutcomeModelKind::LogisticRegression,
        ..NuisanceConfig::default()
    }
}

fn all_cells(ds: &Dataset<f64>) -> Vec<(tate::TreatmentId, tate::TrialId)> {
    ds.trials
        .values()
        .flat_map(|t| t.arms().into_iter().map(move |a| (a, t.trial_id)))
        .collect()
}

#[test]
fn factorized_linear_solves_every_cell_equation() {
    let ds = continuous(21);
    let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
    let (targeted, report) = factorized_tmle_linear(&ds, &nu, &all_cells(&ds)).unwrap();
    assert_eq!(report.weighted_residuals.len(), 12);
    for (&cell, &r) in &report.weighted_residuals {
        assert!(r.abs() < 1e-8, "{cell:?}: {r}");
        assert!((weighted_residual(&ds, &targeted, cell) - r).abs() < 1e-12);
    }
}

#[test]
fn factorized_logistic_solves_every_cell_equation() {
    let ds = binary(22);
    let nu = fit_cross_fitted(&ds, &logistic_config()).unwrap();
    let (targeted, report) = factorized_tmle_logistic(&ds, &nu, &all_cells(&ds)).unwrap();
    for (&cell, &r) in &report.weighted_residuals {
        assert!(r.abs() < 1e-8, "{cell:?}: {r}");
    }
    for (i, o) in ds.observations.iter().enumerate() {
        let m = targeted.mu(i, o, o.a, o.s);
        assert!(m > 0.0 && m < 1.0);
    }
}

#[test]
fn targeted_estimates_stay_near_the_one_step_estimate() {
    let ds = continuous(23);
    let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
    let options = EstimationOptions::default();
    for kind in [EstimatorKind::S1, EstimatorKind::S2M] {
        let q = kind.query().unwrap();
        let dr = estimate_tate(&ds, &nu, &q, &options).unwrap();
        for variant in [TmleVariant::Factorized, TmleVariant::Joint] {
            let (t, report) = estimate_tate_tmle(&ds, &nu, &q, variant, Link::Linear, &options).unwrap();
            assert!((t.psi - dr.psi).abs() < 0.1 * dr.std_error, "{kind} {variant:?}");
            assert!(report.eif_mean < 1e-6);
        }
    }
}

#[test]
fn joint_logistic_converges_on_binary_outcomes() {
    let ds = binary(24);
    let nu = fit_cross_fitted(&ds, &logistic_config()).unwrap();
    for kind in [EstimatorKind::S1, EstimatorKind::S2M] {
        let (t, report) = estimate_tate_tmle(
            &ds,
            &nu,
            &kind.query().unwrap(),
            TmleVariant::Joint,
            Link::Logistic,
            &EstimationOptions::default(),
        )
        .unwrap();
        assert!(report.converged && report.iterations <= JOINT_MAX_ITER, "{kind}");
        assert!(report.eif_mean < 1e-6, "{kind}: {}", report.eif_mean);
        assert!(t.psi.is_finite() && t.std_error > 0.0);
    }
}

#[test]
fn targeting_twice_changes_nothing() {
    let ds = continuous(25);
    let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
    let cells = all_cells(&ds);
    let (once, _) = factorized_tmle_linear(&ds, &nu, &cells).unwrap();
    let (twice, report) = factorized_tmle_linear(&ds, &once, &cells).unwrap();
    for f in &report.fluctuations {
        assert!(f.epsilon.abs() < 1e-10);
    }
    let a = estimate_marginal_mean(&ds, &once, cells[0].0, cells[0].1).unwrap();
    let b = estimate_marginal_mean(&ds, &twice, cells[0].0, cells[0].1).unwrap();
    assert!((a.value - b.value).abs() < 1e-10);
}

#[test]
fn known_membership_form_also_targets() {
    let ds = continuous(26);
    let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
    let options = EstimationOptions {
        influence: InfluenceForm::KnownMembership,
        ..EstimationOptions::default()
    };
    let (_, report) = estimate_tate_tmle(
        &ds,
        &nu,
        &EstimatorKind::S2M.query().unwrap(),
        TmleVariant::Joint,
        Link::Linear,
        &options,
    )
    .unwrap();
    assert!(report.converged && report.eif_mean < 1e-6);
}

#[test]
fn logistic_link_rejects_continuous_outcomes() {
    let ds = continuous(27);
    let nu = fit_cross_fitted(&ds, &NuisanceConfig::default()).unwrap();
    let r = estimate_tate_tmle(
        &ds,
        &nu,
        &EstimatorKind::S1.query().unwrap(),
        TmleVariant::Joint,
        Link::Logistic,
        &EstimationOptions::default(),
    );
    assert!(r.is_err());
}
