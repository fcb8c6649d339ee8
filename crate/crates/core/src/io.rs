//! File formats: observation and trial tables, embedding tables, key=value
//! configuration files, and csv / aligned-table reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::cluster::{ClusterAssignment, EmbeddingCorpus};
use crate::error::{Result, TateError};
use crate::model::{validate_dataset, Dataset, Observation, TreatmentId, TrialId, TrialSpec};
use crate::scalar::Scalar;
use crate::simlab::EstimatorMetrics;
use crate::transport::TateResult;

pub const TRIALS_HEADER: [&str; 6] = ["k", "arm_a", "arm_b", "t0", "t1", "p_arm_a"];

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> TateError {
    TateError::Parse {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

fn header(path: &Path, reader: &mut csv::Reader<File>) -> Result<Vec<String>> {
    let h = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(|s| s.trim_start_matches('\u{feff}').to_string())
        .collect::<Vec<_>>();
    if h.is_empty() || h.iter().all(String::is_empty) {
        return Err(parse_err(path, 1, "missing header"));
    }
    Ok(h)
}

fn field<V: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("column {name}: cannot parse {raw:?}")))
}

/// Rows of a csv file with their line numbers, after checking the header and row widths.
fn rows(
    path: &Path,
    expected: impl Fn(&[String]) -> std::result::Result<(), String>,
) -> Result<(Vec<String>, Vec<(u64, csv::StringRecord)>)> {
    let mut reader = csv_reader(path)?;
    let head = header(path, &mut reader)?;
    expected(&head).map_err(|m| parse_err(path, 1, m))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != head.len() {
            return Err(parse_err(
                path,
                line,
                format!("ragged row: {} fields, header has {}", rec.len(), head.len()),
            ));
        }
        out.push((line, rec));
    }
    Ok((head, out))
}

pub fn read_trials<T: Scalar>(path: &Path) -> Result<Vec<TrialSpec<T>>> {
    let (_, records) = rows(path, |h| {
        if h == TRIALS_HEADER {
            Ok(())
        } else {
            Err(format!(
                "expected header {}, found {}",
                TRIALS_HEADER.join(","),
                h.join(",")
            ))
        }
    })?;
    let mut seen = BTreeMap::new();
    records
        .into_iter()
        .map(|(line, r)| {
            let k: u32 = field(path, line, "k", &r[0])?;
            if let Some(prev) = seen.insert(k, line) {
                return Err(parse_err(
                    path,
                    line,
                    format!("trial {k} already defined on line {prev}"),
                ));
            }
            let p: f64 = field(path, line, "p_arm_a", &r[5])?;
            Ok(TrialSpec {
                trial_id: TrialId(k),
                arm_a: TreatmentId(field(path, line, "arm_a", &r[1])?),
                arm_b: TreatmentId(field(path, line, "arm_b", &r[2])?),
                t0: field(path, line, "t0", &r[3])?,
                t1: field(path, line, "t1", &r[4])?,
                p_arm_a: T::of(p),
            })
        })
        .collect()
}

/// Number of numbered columns `{prefix}1, {prefix}2, ...` after the fixed ones.
fn numbered_columns(head: &[String], fixed: &[&str], prefix: char) -> std::result::Result<usize, String> {
    if head.len() < fixed.len() || head[..fixed.len()] != *fixed {
        return Err(format!("header must start with {}", fixed.join(",")));
    }
    for (j, name) in head[fixed.len()..].iter().enumerate() {
        if *name != format!("{prefix}{}", j + 1) {
            return Err(format!(
                "column {} should be named {prefix}{}, found {name}",
                fixed.len() + j + 1,
                j + 1
            ));
        }
    }
    Ok(head.len() - fixed.len())
}

/// Reads an observation table (`y,a,s,x1,...,xd`) and a trial table
/// (`k,arm_a,arm_b,t0,t1,p_arm_a`). With `aggregate`, the observation table
/// is `a,s,count,successes,x1,...,xd` and each row expands to `successes`
/// outcomes of 1 and `count − successes` outcomes of 0.
pub fn read_observations<T: Scalar>(observations: &Path, trials: &Path, aggregate: bool) -> Result<Dataset<T>> {
    let specs = read_trials::<T>(trials)?;
    let registry: BTreeMap<TrialId, &TrialSpec<T>> = specs.iter().map(|t| (t.trial_id, t)).collect();
    let fixed: &[&str] = if aggregate {
        &["a", "s", "count", "successes"]
    } else {
        &["y", "a", "s"]
    };
    let (head, records) = rows(observations, |h| numbered_columns(h, fixed, 'x').map(|_| ()))?;
    let d = head.len() - fixed.len();
    let mut obs = Vec::new();
    for (line, r) in records {
        let (a_col, s_col) = if aggregate { (0, 1) } else { (1, 2) };
        let a = TreatmentId(field(observations, line, "a", &r[a_col])?);
        let s = TrialId(field(observations, line, "s", &r[s_col])?);
        match registry.get(&s) {
            None => return Err(parse_err(observations, line, format!("unknown trial {s}"))),
            Some(t) if !t.has_arm(a) => {
                return Err(parse_err(
                    observations,
                    line,
                    format!("arm {a} is not an arm of trial {s}"),
                ))
            }
            Some(_) => {}
        }
        let x = (0..d)
            .map(|j| {
                let v: f64 = field(observations, line, &head[fixed.len() + j], &r[fixed.len() + j])?;
                if v.is_finite() {
                    Ok(T::of(v))
                } else {
                    Err(parse_err(
                        observations,
                        line,
                        format!("non-finite covariate x{}", j + 1),
                    ))
                }
            })
            .collect::<Result<Vec<T>>>()?;
        if aggregate {
            let count: u64 = field(observations, line, "count", &r[2])?;
            let successes: u64 = field(observations, line, "successes", &r[3])?;
            if successes > count {
                return Err(parse_err(
                    observations,
                    line,
                    format!("successes {successes} exceed count {count}"),
                ));
            }
            for j in 0..count {
                obs.push(Observation {
                    y: if j < successes { T::one() } else { T::zero() },
                    a,
                    s,
                    x: x.clone(),
                });
            }
        } else {
            let y: f64 = field(observations, line, "y", &r[0])?;
            if !y.is_finite() {
                return Err(parse_err(observations, line, "non-finite outcome"));
            }
            obs.push(Observation { y: T::of(y), a, s, x });
        }
    }
    let dataset = Dataset::new(specs, obs, d);
    let violations = validate_dataset(&dataset);
    if !violations.is_empty() {
        return Err(TateError::InvalidDataset(
            violations.iter().map(ToString::to_string).collect(),
        ));
    }
    Ok(dataset)
}

/// 17 significant digits: parses back to the identical `f64`.
fn exact(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset<T: Scalar>(dataset: &Dataset<T>, observations: &Path, trials: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(observations)?);
    let mut head = vec!["y".to_string(), "a".into(), "s".into()];
    head.extend((1..=dataset.d).map(|j| format!("x{j}")));
    writeln!(w, "{}", head.join(","))?;
    for o in &dataset.observations {
        let mut fields = vec![exact(o.y.as_f64()), o.a.to_string(), o.s.to_string()];
        fields.extend(o.x.iter().map(|v| exact(v.as_f64())));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(trials)?);
    writeln!(w, "{}", TRIALS_HEADER.join(","))?;
    for t in dataset.trials.values() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t.trial_id,
            t.arm_a,
            t.arm_b,
            t.t0,
            t.t1,
            exact(t.p_arm_a.as_f64())
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `item_id,test_id,v1,...,v{d}`.
pub fn read_embeddings<T: Scalar>(path: &Path) -> Result<EmbeddingCorpus<T>> {
    let mut reader = csv_reader(path)?;
    let head = header(path, &mut reader)?;
    let fixed = ["item_id", "test_id"];
    let dim = numbered_columns(&head, &fixed, 'v').map_err(|m| parse_err(path, 1, m))?;
    if dim == 0 {
        return Err(parse_err(path, 1, "no embedding columns v1..vd"));
    }
    let mut items = BTreeMap::new();
    let mut tests: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != head.len() {
            return Err(parse_err(
                path,
                line,
                format!("vector length {}, expected {dim}", rec.len().saturating_sub(2)),
            ));
        }
        let id = rec[0].to_string();
        let v = (0..dim)
            .map(|j| field::<f64>(path, line, &head[2 + j], &rec[2 + j]).map(T::of))
            .collect::<Result<Vec<T>>>()?;
        if items.insert(id.clone(), v).is_some() {
            return Err(parse_err(path, line, format!("duplicate item_id {id}")));
        }
        tests.entry(rec[1].to_string()).or_default().push(id);
    }
    Ok(EmbeddingCorpus { items, tests, dim })
}

/// `key = value` lines; `#` starts a comment.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(parse_err(
                path,
                i as u64 + 1,
                format!("expected key=value, found {line:?}"),
            ));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Table,
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.6}")
    }
}

fn render(header: &[&str], rows: &[Vec<String>], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for r in rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..header.len())
                .map(|j| {
                    rows.iter()
                        .map(|r| r[j].len())
                        .chain([header[j].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: Vec<&str>| -> String {
                cells
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        if j == 0 {
                            format!("{c:<w$}", w = widths[j])
                        } else {
                            format!("{c:>w$}", w = widths[j])
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            out.push_str(&line(header.to_vec()));
            out.push('\n');
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len().saturating_sub(1));
            out.push_str(&"-".repeat(total));
            out.push('\n');
            for r in rows {
                out.push_str(&line(r.iter().map(String::as_str).collect()));
                out.push('\n');
            }
        }
    }
    out
}

pub const METRICS_HEADER: [&str; 8] = [
    "estimator",
    "n",
    "bias",
    "rmse",
    "se_ratio",
    "coverage",
    "reps",
    "failures",
];

/// Simulation metrics, one row per (estimator, n).
pub fn render_metrics(rows: &[EstimatorMetrics], format: ReportFormat) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|m| {
            vec![
                m.estimator.label().to_string(),
                m.n.to_string(),
                fmt6(m.bias),
                fmt6(m.rmse),
                fmt6(m.se_ratio),
                fmt6(m.coverage),
                (m.successes + m.failures).to_string(),
                m.failures.to_string(),
            ]
        })
        .collect();
    render(&METRICS_HEADER, &body, format)
}

pub const ESTIMATE_HEADER: [&str; 6] = ["psi", "se", "ci_low", "ci_high", "ratio", "p_value"];

/// One row per transported-effect estimate; `p_value` is empty without a specification test.
pub fn render_estimates<T: Scalar>(results: &[TateResult<T>], format: ReportFormat) -> String {
    let body: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                fmt6(r.psi.as_f64()),
                fmt6(r.std_error.as_f64()),
                fmt6(r.ci_low.as_f64()),
                fmt6(r.ci_high.as_f64()),
                fmt6(r.ratio.as_f64()),
                r.p_value().map_or(String::new(), |p| fmt6(p.as_f64())),
            ]
        })
        .collect();
    render(&ESTIMATE_HEADER, &body, format)
}

pub const SPEC_TEST_HEADER: [&str; 4] = ["q", "df", "p_value", "ratios"];

pub fn render_spec_test<T: Scalar>(q: T, df: usize, p_value: T, ratios: &[T], format: ReportFormat) -> String {
    let ratios = ratios.iter().map(|r| fmt6(r.as_f64())).collect::<Vec<_>>().join(";");
    render(
        &SPEC_TEST_HEADER,
        &[vec![fmt6(q.as_f64()), df.to_string(), fmt6(p_value.as_f64()), ratios]],
        format,
    )
}

pub const CLUSTER_HEADER: [&str; 3] = ["item_id", "test_id", "cluster"];

pub fn render_clusters<T: Scalar>(
    corpus: &EmbeddingCorpus<T>,
    assignment: &ClusterAssignment<T>,
    format: ReportFormat,
) -> String {
    let mut body = Vec::new();
    for (test, members) in &corpus.tests {
        for id in members {
            body.push(vec![id.clone(), test.clone(), assignment.cluster_of[id].to_string()]);
        }
    }
    render(&CLUSTER_HEADER, &body, format)
}

/// Writes to `path`, or standard output when `None`.
pub fn write_report(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(text.as_bytes())?;
            lock.flush()?;
        }
    }
    Ok(())
}
