//! Command-line front end: `simulate`, `estimate`, `spec-test`, `cluster`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cluster::{cluster_corpus, CostKind};
use crate::dr::InfluenceForm;
use crate::error::{Result, TateError};
use crate::io::{
    read_config, read_embeddings, read_observations, render_clusters, render_estimates, render_metrics,
    render_spec_test, write_report, ReportFormat,
};
use crate::model::{CommonArmAnchor, Dataset, Strategy, TransportQuery, TreatmentId, TrialId};
use crate::nuisance::{
    fit_cross_fitted, MembershipModelKind, NuisanceConfig, OutcomeModelKind, PropensityModelKind,
    DEFAULT_LEARNING_RATE, DEFAULT_TREES,
};
use crate::simlab::{run_monte_carlo, DgpConfig, EstimatorKind, MonteCarloConfig};
use crate::tmle::{estimate_tate_tmle, Link, TmleVariant};
use crate::transport::{anchor_ratios, estimate_tate, specification_test, Contrast, EstimationOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tate",
    version,
    about = "Transported average treatment effects across time",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo study of the estimators on the simulation design.
    Simulate(SimulateArgs),
    /// Transported effect for one query on observed data.
    Estimate(EstimateArgs),
    /// Test of equal temporal ratios across common-arm anchors.
    SpecTest(SpecTestArgs),
    /// k-means clustering with per-test injective assignment of embeddings.
    Cluster(ClusterArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Table,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Table => ReportFormat::Table,
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// key=value file supplying defaults for any long flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MembershipArg {
    Empirical,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PropensityArg {
    Design,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InfluenceArg {
    /// Trial membership probabilities treated as estimated.
    Estimated,
    /// Trial membership probabilities treated as known.
    Known,
}

impl From<InfluenceArg> for InfluenceForm {
    fn from(f: InfluenceArg) -> Self {
        match f {
            InfluenceArg::Estimated => InfluenceForm::EstimatedMembership,
            InfluenceArg::Known => InfluenceForm::KnownMembership,
        }
    }
}

#[derive(Debug, Args)]
pub struct NuisanceArgs {
    /// Outcome model: `linear`, `logistic`, `boosting` or `boosting:TREES:RATE`.
    #[arg(long, default_value = "linear")]
    pub nuisance: String,
    #[arg(long, value_enum, default_value = "empirical")]
    pub membership: MembershipArg,
    #[arg(long, value_enum, default_value = "design")]
    pub propensity: PropensityArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Influence function used for standard errors and the specification test.
    #[arg(long, value_enum, default_value = "estimated")]
    pub influence: InfluenceArg,
}

impl NuisanceArgs {
    fn config(&self, seed: u64) -> std::result::Result<NuisanceConfig, String> {
        let outcome_model = parse_outcome_model(&self.nuisance)?;
        if self.folds < 2 {
            return Err(format!("--folds must be at least 2, got {}", self.folds));
        }
        Ok(NuisanceConfig {
            outcome_model,
            trial_membership: match self.membership {
                MembershipArg::Empirical => MembershipModelKind::EmpiricalProportion,
                MembershipArg::Multinomial => MembershipModelKind::MultinomialLogistic,
            },
            treatment_propensity: match self.propensity {
                PropensityArg::Design => PropensityModelKind::KnownDesign,
                PropensityArg::Empirical => PropensityModelKind::Empirical,
            },
            n_folds: self.folds,
            seed,
            ..NuisanceConfig::default()
        })
    }
}

pub fn parse_outcome_model(s: &str) -> std::result::Result<OutcomeModelKind, String> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    match parts.as_slice() {
        ["linear"] => Ok(OutcomeModelKind::LinearLeastSquares),
        ["logistic"] => Ok(OutcomeModelKind::LogisticRegression),
        ["boosting"] => Ok(OutcomeModelKind::BoostedStumps {
            n_trees: DEFAULT_TREES,
            learning_rate: DEFAULT_LEARNING_RATE,
        }),
        ["boosting", trees, rate] => {
            let n_trees: usize = trees.parse().map_err(|_| format!("bad tree count {trees:?}"))?;
            let learning_rate: f64 = rate.parse().map_err(|_| format!("bad learning rate {rate:?}"))?;
            if n_trees == 0 || !(learning_rate > 0.0 && learning_rate <= 1.0) {
                return Err(format!("boosting needs trees >= 1 and rate in (0, 1], got {s:?}"));
            }
            Ok(OutcomeModelKind::BoostedStumps { n_trees, learning_rate })
        }
        _ => Err(format!("unknown outcome model {s:?}")),
    }
}

fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("bad alpha {s:?}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {a}"))
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Total sample sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1200")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Estimators, comma separated (Oracle, S1, S2-C, S2-T, S2-M, S1-TMLE, ...).
    #[arg(long, value_delimiter = ',', default_value = "Oracle,S1,S2-C,S2-T,S2-M")]
    pub estimators: Vec<String>,
    #[arg(long, default_value = "0.05", value_parser = parse_alpha)]
    pub alpha: f64,
    /// Gap-dependent violation of the measurement-time assumption.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    #[command(flatten)]
    pub nuisance: NuisanceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    /// Replicated trials (`--anchors J,J'`).
    S1,
    /// Common arms (`--anchors ARM:TARGET_TRIAL:SOURCE_TRIAL,...`).
    S2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TmleArg {
    None,
    Factorized,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkArg {
    Linear,
    Logistic,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Observation table `y,a,s,x1,...`.
    #[arg(long)]
    pub data: PathBuf,
    /// Trial table `k,arm_a,arm_b,t0,t1,p_arm_a`.
    #[arg(long)]
    pub trials: PathBuf,
    /// Observation table holds `a,s,count,successes,x1,...` counts.
    #[arg(long)]
    pub aggregate: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub target_trial: u32,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub delta0: i64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub delta1: i64,
    #[arg(long)]
    pub anchors: String,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long, value_enum, default_value = "none")]
    pub tmle: TmleArg,
    #[arg(long, value_enum, default_value = "linear")]
    pub link: LinkArg,
    #[arg(long, default_value = "0.05", value_parser = parse_alpha)]
    pub alpha: f64,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub nuisance: NuisanceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SpecTestArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub nuisance: NuisanceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    Squared,
    Euclidean,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Embedding table `item_id,test_id,v1,...`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "squared")]
    pub cost: CostArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// `J,J'` for replicated trials, `ARM:TARGET:SOURCE[,...]` for common arms.
pub fn parse_strategy(strategy: StrategyArg, anchors: &str) -> std::result::Result<Strategy, String> {
    let fields: Vec<&str> = anchors.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    match strategy {
        StrategyArg::S1 => {
            let [j, jp] = fields.as_slice() else {
                return Err(format!("s1 anchors must be `J,J'`, got {anchors:?}"));
            };
            let parse = |s: &str| s.parse::<u32>().map(TrialId).map_err(|_| format!("bad trial id {s:?}"));
            Ok(Strategy::Replicated {
                anchor_j: parse(j)?,
                anchor_jprime: parse(jp)?,
            })
        }
        StrategyArg::S2 => {
            if fields.is_empty() {
                return Err("s2 needs at least one ARM:TARGET:SOURCE anchor".into());
            }
            let anchors = fields
                .iter()
                .map(|f| {
                    let parts: Vec<&str> = f.split(':').collect();
                    let [arm, at_target, at_source] = parts.as_slice() else {
                        return Err(format!("anchor {f:?} is not ARM:TARGET:SOURCE"));
                    };
                    let num = |s: &str| {
                        s.parse::<u32>()
                            .map_err(|_| format!("bad number {s:?} in anchor {f:?}"))
                    };
                    Ok(CommonArmAnchor {
                        arm: TreatmentId(num(arm)?),
                        trial_at_target: TrialId(num(at_target)?),
                        trial_at_source: TrialId(num(at_source)?),
                    })
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            Ok(Strategy::CommonArm { anchors })
        }
    }
}

enum Failure {
    Usage(String),
    Data(TateError),
}

impl From<TateError> for Failure {
    fn from(e: TateError) -> Self {
        Failure::Data(e)
    }
}

/// Inserts `--key value` pairs from `--config FILE` ahead of the explicit
/// flags, so that explicit flags override them.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let pos = args.iter().position(|a| a == "--config");
    let inline = args
        .iter()
        .position(|a| a.to_str().is_some_and(|s| s.starts_with("--config=")));
    let path: PathBuf = match (pos, inline) {
        (Some(i), _) => match args.get(i + 1) {
            Some(p) => PathBuf::from(p),
            None => return Ok(args),
        },
        (None, Some(i)) => PathBuf::from(&args[i].to_str().unwrap()["--config=".len()..]),
        (None, None) => return Ok(args),
    };
    let entries = read_config(&path).map_err(|e| Failure::Usage(e.to_string()))?;
    if args.len() < 2 {
        return Ok(args);
    }
    let mut out = args[..2].to_vec();
    for (k, v) in entries {
        if k == "config" {
            continue;
        }
        let flag = format!("--{}", k.replace('_', "-"));
        if v.eq_ignore_ascii_case("true") {
            out.push(flag.into());
        } else if v.eq_ignore_ascii_case("false") {
            continue;
        } else {
            out.push(flag.into());
            out.push(v.into());
        }
    }
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

fn load_dataset(data: &DataArgs) -> Result<Dataset<f64>> {
    read_observations(&data.data, &data.trials, data.aggregate)
}

fn query_from(strategy: StrategyArg, q: &QueryArgs) -> std::result::Result<TransportQuery, Failure> {
    Ok(TransportQuery {
        target_trial: TrialId(q.target_trial),
        delta0: q.delta0,
        delta1: q.delta1,
        strategy: parse_strategy(strategy, &q.anchors).map_err(Failure::Usage)?,
    })
}

fn emit(text: &str, out: Option<&Path>) -> std::result::Result<(), Failure> {
    write_report(text, out).map_err(Failure::Data)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn simulate(args: &SimulateArgs) -> std::result::Result<(), Failure> {
    let estimators = args
        .estimators
        .iter()
        .map(|e| EstimatorKind::parse(e).ok_or_else(|| Failure::Usage(format!("unknown estimator {e:?}"))))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let nuisance = args.nuisance.config(args.output.seed).map_err(Failure::Usage)?;
    let mut rows = Vec::new();
    for &n in &args.n {
        let config = MonteCarloConfig {
            dgp: DgpConfig {
                n_total: n,
                violation_kappa: args.kappa,
                noise_sd: args.noise_sd,
                ..DgpConfig::default()
            },
            reps: args.reps,
            estimators: estimators.clone(),
            master_seed: args.output.seed,
            nuisance: nuisance.clone(),
            alpha: args.alpha,
            influence: args.nuisance.influence.into(),
        };
        let metrics = run_monte_carlo(&config)?;
        for m in &metrics.rows {
            for (reason, count) in &m.failure_reasons {
                eprintln!(
                    "warning: {} at n = {n}: {count} failed replications: {reason}",
                    m.estimator
                );
            }
        }
        rows.extend(metrics.rows);
    }
    emit(
        &render_metrics(&rows, args.output.format.into()),
        args.output.out.as_deref(),
    )
}

fn estimate(args: &EstimateArgs) -> std::result::Result<(), Failure> {
    let query = query_from(args.strategy, &args.query)?;
    let nuisance_config = args.nuisance.config(args.output.seed).map_err(Failure::Usage)?;
    let dataset = load_dataset(&args.data)?;
    let nuisance = fit_cross_fitted(&dataset, &nuisance_config)?;
    warn_all(nuisance.warnings());
    let options = EstimationOptions {
        influence: args.nuisance.influence.into(),
        ..EstimationOptions::with_alpha(args.alpha)
    };
    let link = match args.link {
        LinkArg::Linear => Link::Linear,
        LinkArg::Logistic => Link::Logistic,
    };
    let result = match args.tmle {
        TmleArg::None => estimate_tate(&dataset, &nuisance, &query, &options)?,
        TmleArg::Factorized | TmleArg::Joint => {
            let variant = if args.tmle == TmleArg::Joint {
                TmleVariant::Joint
            } else {
                TmleVariant::Factorized
            };
            let (result, report) = estimate_tate_tmle(&dataset, &nuisance, &query, variant, link, &options)?;
            eprintln!(
                "tmle: {} iterations, converged = {}, |P_n IF| = {:e}",
                report.iterations, report.converged, report.eif_mean
            );
            result
        }
    };
    warn_all(&result.warnings);
    emit(
        &render_estimates(&[result], args.output.format.into()),
        args.output.out.as_deref(),
    )
}

fn spec_test(args: &SpecTestArgs) -> std::result::Result<(), Failure> {
    let query = query_from(StrategyArg::S2, &args.query)?;
    let Strategy::CommonArm { anchors } = &query.strategy else {
        unreachable!("s2 parses to common-arm anchors");
    };
    if anchors.len() < 2 {
        return Err(Failure::Usage("spec-test needs at least two anchors".into()));
    }
    let nuisance_config = args.nuisance.config(args.output.seed).map_err(Failure::Usage)?;
    let dataset = load_dataset(&args.data)?;
    let violations = crate::model::validate_query(&dataset, &query);
    if !violations.is_empty() {
        return Err(TateError::InvalidQuery(violations.iter().map(ToString::to_string).collect()).into());
    }
    let nuisance = fit_cross_fitted(&dataset, &nuisance_config)?;
    warn_all(nuisance.warnings());
    let set = anchor_ratios(&dataset, &nuisance, anchors, args.nuisance.influence.into())?;
    let t = specification_test(&set, &Contrast::SuccessiveDifferences)?;
    warn_all(&t.warnings);
    emit(
        &render_spec_test(t.q, t.df, t.p_value, &set.ratios, args.output.format.into()),
        args.output.out.as_deref(),
    )
}

fn cluster(args: &ClusterArgs) -> std::result::Result<(), Failure> {
    let corpus = read_embeddings::<f64>(&args.embeddings)?;
    let cost = match args.cost {
        CostArg::Squared => CostKind::SquaredEuclidean,
        CostArg::Euclidean => CostKind::Euclidean,
    };
    let assignment = cluster_corpus(&corpus, args.k, args.output.seed, cost)?;
    warn_all(&assignment.warnings);
    emit(
        &render_clusters(&corpus, &assignment, args.output.format.into()),
        args.output.out.as_deref(),
    )
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit status.
pub fn run_cli<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            return EXIT_USAGE;
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            return EXIT_DATA;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::SpecTest(a) => spec_test(a),
        Command::Cluster(a) => cluster(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
