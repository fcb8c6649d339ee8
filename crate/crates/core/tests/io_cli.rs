use std::fs;
use std::path::{Path, PathBuf};

use tate::cli::{run_cli, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use tate::io::{read_config, read_embeddings, read_observations, read_trials, write_dataset};
use tate::simlab::{draw_dataset, DgpConfig};
use tate::{Dataset, TreatmentId, TrialId};
use tempfile::TempDir;

const TRIALS: &str = "k,arm_a,arm_b,t0,t1,p_arm_a\n1,1,0,1,3,0.5\n2,1,0,7,9,0.5\n";

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn simulated(dir: &TempDir, seed: u64) -> (PathBuf, PathBuf, Dataset) {
    let ds: Dataset = draw_dataset(&DgpConfig {
        seed,
        n_total: 600,
        ..DgpConfig::default()
    })
    .unwrap();
    let (obs, trials) = (dir.path().join("obs.csv"), dir.path().join("trials.csv"));
    write_dataset(&ds, &obs, &trials).unwrap();
    (obs, trials, ds)
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("tate").chain(args.iter().copied()))
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = TempDir::new().unwrap();
    let (obs, trials, ds) = simulated(&dir, 31);
    let back: Dataset = read_observations(&obs, &trials, false).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn crlf_and_trailing_blank_lines_are_accepted() {
    let dir = TempDir::new().unwrap();
    let trials = write(&dir, "t.csv", &TRIALS.replace('\n', "\r\n"));
    let obs = write(
        &dir,
        "o.csv",
        "y,a,s,x1\r\n1.5,1,1,0.2\r\n0.5,0,1,-0.2\r\n2,1,2,0.1\r\n1,0,2,0.3\r\n\r\n",
    );
    let ds: Dataset = read_observations(&obs, &trials, false).unwrap();
    assert_eq!(ds.n(), 4);
    assert_eq!(ds.observations[2].y, 2.0);
    assert_eq!(read_trials::<f64>(&trials).unwrap().len(), 2);
}

fn parse_error(result: tate::error::Result<Dataset>) -> (u64, String) {
    match result {
        Err(tate::error::TateError::Parse { line, message, .. }) => (line, message),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn ragged_row_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let trials = write(&dir, "t.csv", TRIALS);
    let obs = write(&dir, "o.csv", "y,a,s,x1\n1,1,1,0.2\n0,0,1\n");
    let (line, message) = parse_error(read_observations(&obs, &trials, false));
    assert_eq!(line, 3);
    assert!(message.contains("ragged"), "{message}");
}

#[test]
fn unknown_trial_and_foreign_arm_are_rejected() {
    let dir = TempDir::new().unwrap();
    let trials = write(&dir, "t.csv", TRIALS);
    let obs = write(&dir, "o.csv", "y,a,s,x1\n1,1,1,0.2\n1,1,9,0.2\n");
    let (line, message) = parse_error(read_observations(&obs, &trials, false));
    assert_eq!(line, 3);
    assert!(message.contains("unknown trial"), "{message}");
    let obs = write(&dir, "o2.csv", "y,a,s,x1\n1,2,1,0.2\n");
    let (line, _) = parse_error(read_observations(&obs, &trials, false));
    assert_eq!(line, 2);
}

#[test]
fn bad_headers_are_rejected() {
    let dir = TempDir::new().unwrap();
    let trials = write(&dir, "t.csv", TRIALS);
    let obs = write(&dir, "o.csv", "y,a,s,x2\n1,1,1,0.2\n");
    assert_eq!(parse_error(read_observations(&obs, &trials, false)).0, 1);
    let bad_trials = write(&dir, "bt.csv", "k,arm_a,arm_b,t0,t1\n1,1,0,1,3\n");
    assert!(read_trials::<f64>(&bad_trials).is_err());
}

#[test]
fn aggregate_rows_expand_to_binary_outcomes() {
    let dir = TempDir::new().unwrap();
    let trials = write(&dir, "t.csv", TRIALS);
    let obs = write(
        &dir,
        "o.csv",
        "a,s,count,successes,x1\n1,1,3,2,0.5\n0,1,2,0,0.5\n1,2,1,1,0\n0,2,1,0,0\n",
    );
    let ds: Dataset = read_observations(&obs, &trials, true).unwrap();
    assert_eq!(ds.n(), 7);
    let ys: Vec<f64> = ds.observations.iter().map(|o| o.y).collect();
    assert_eq!(ys, vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    assert_eq!(ds.observations[0].a, TreatmentId(1));
    assert_eq!(ds.observations[5].s, TrialId(2));
    let bad = write(&dir, "b.csv", "a,s,count,successes,x1\n1,1,1,2,0.5\n");
    assert!(read_observations::<f64>(&bad, &trials, true).is_err());
}

#[test]
fn embeddings_parse_and_flag_bad_lengths() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "e.csv", "item_id,test_id,v1,v2\na,t1,0,1\nb,t1,1,0\nc,t2,2,2\n");
    let c = read_embeddings::<f64>(&p).unwrap();
    assert_eq!(c.dim, 2);
    assert_eq!(c.tests["t1"], vec!["a".to_string(), "b".to_string()]);
    let bad = write(&dir, "bad.csv", "item_id,test_id,v1,v2\na,t1,0,1\nb,t1,1\n");
    assert!(read_embeddings::<f64>(&bad).is_err());
    let dup = write(&dir, "dup.csv", "item_id,test_id,v1\na,t1,0\na,t2,1\n");
    assert!(read_embeddings::<f64>(&dup).is_err());
}

#[test]
fn config_files_are_key_value_with_comments() {
    let dir = TempDir::new().unwrap();
    let p = write(
        &dir,
        "c.conf",
        "# defaults\nreps = 7\nseed=3 # inline\n\nestimators = S1,S2-M\n",
    );
    let c = read_config(&p).unwrap();
    assert_eq!(c.len(), 3);
    assert_eq!(c["reps"], "7");
    assert_eq!(c["seed"], "3");
    assert_eq!(c["estimators"], "S1,S2-M");
    assert!(read_config(&write(&dir, "bad.conf", "reps 7\n")).is_err());
}

#[test]
fn estimate_writes_one_row() {
    let dir = TempDir::new().unwrap();
    let (obs, trials, _) = simulated(&dir, 32);
    let out = dir.path().join("est.csv");
    let code = cli(&[
        "estimate",
        "--strategy",
        "s2",
        "--target-trial",
        "1",
        "--delta0",
        "6",
        "--delta1",
        "6",
        "--anchors",
        "0:5:4,2:5:4",
        "--data",
        arg(&obs),
        "--trials",
        arg(&trials),
        "--out",
        arg(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "psi,se,ci_low,ci_high,ratio,p_value");
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), 6);
    let psi: f64 = fields[0].parse().unwrap();
    let (lo, hi): (f64, f64) = (fields[2].parse().unwrap(), fields[3].parse().unwrap());
    assert!(lo < psi && psi < hi);
    assert!(!fields[5].is_empty());
}

#[test]
fn estimate_with_tmle_and_s1() {
    let dir = TempDir::new().unwrap();
    let (obs, trials, _) = simulated(&dir, 33);
    let out = dir.path().join("est.csv");
    let code = cli(&[
        "estimate",
        "--strategy",
        "s1",
        "--target-trial",
        "1",
        "--delta0",
        "6",
        "--delta1",
        "6",
        "--anchors",
        "2,3",
        "--tmle",
        "joint",
        "--data",
        arg(&obs),
        "--trials",
        arg(&trials),
        "--out",
        arg(&out),
        "--format",
        "table",
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("psi"));
    assert!(text.lines().nth(1).unwrap().chars().all(|c| c == '-'));
}

#[test]
fn spec_test_reports_q_df_and_p() {
    let dir = TempDir::new().unwrap();
    let (obs, trials, _) = simulated(&dir, 34);
    let out = dir.path().join("q.csv");
    let code = cli(&[
        "spec-test",
        "--target-trial",
        "1",
        "--delta0",
        "6",
        "--delta1",
        "6",
        "--anchors",
        "0:5:4,2:5:4",
        "--data",
        arg(&obs),
        "--trials",
        arg(&trials),
        "--out",
        arg(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(text.lines().next().unwrap(), "q,df,p_value,ratios");
    assert_eq!(row[1], "1");
    let p: f64 = row[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(row[3].split(';').count(), 2);
}

#[test]
fn cluster_subcommand_labels_every_item() {
    let dir = TempDir::new().unwrap();
    let emb = write(
        &dir,
        "e.csv",
        "item_id,test_id,v1,v2\na,t1,0,0\nb,t1,5,5\nc,t2,0.1,0\nd,t2,5,5.1\ne,t3,0,0.1\n",
    );
    let out = dir.path().join("c.csv");
    assert_eq!(
        cli(&["cluster", "--embeddings", arg(&emb), "--k", "2", "--out", arg(&out)]),
        EXIT_OK
    );
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "item_id,test_id,cluster");
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = TempDir::new().unwrap();
    let (obs, trials, _) = simulated(&dir, 35);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["simulate", "--alpha", "1.5"]), EXIT_USAGE);
    assert_eq!(cli(&["simulate", "--estimators", "Bogus"]), EXIT_USAGE);
    assert_eq!(
        cli(&[
            "estimate",
            "--strategy",
            "s2",
            "--target-trial",
            "1",
            "--anchors",
            "0-5-4",
            "--data",
            arg(&obs),
            "--trials",
            arg(&trials)
        ]),
        EXIT_USAGE
    );
    let missing = dir.path().join("missing.csv");
    assert_eq!(
        cli(&[
            "estimate",
            "--strategy",
            "s1",
            "--target-trial",
            "1",
            "--anchors",
            "2,3",
            "--data",
            arg(&missing),
            "--trials",
            arg(&trials)
        ]),
        EXIT_DATA
    );
    // trial 9 does not exist
    assert_eq!(
        cli(&[
            "estimate",
            "--strategy",
            "s1",
            "--target-trial",
            "9",
            "--delta0",
            "6",
            "--delta1",
            "6",
            "--anchors",
            "2,3",
            "--data",
            arg(&obs),
            "--trials",
            arg(&trials)
        ]),
        EXIT_DATA
    );
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn explicit_flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let conf = write(&dir, "sim.conf", "n = 600\nreps = 2\nestimators = S1\nseed = 5\n");
    let (a, b, c) = (
        dir.path().join("a.csv"),
        dir.path().join("b.csv"),
        dir.path().join("c.csv"),
    );
    assert_eq!(cli(&["simulate", "--config", arg(&conf), "--out", arg(&a)]), EXIT_OK);
    assert_eq!(
        cli(&["simulate", "--config", arg(&conf), "--reps", "3", "--out", arg(&b)]),
        EXIT_OK
    );
    assert_eq!(
        cli(&[
            "simulate",
            "--n",
            "600",
            "--reps",
            "2",
            "--estimators",
            "S1",
            "--seed",
            "5",
            "--out",
            arg(&c)
        ]),
        EXIT_OK
    );
    let (a, b, c) = (
        fs::read_to_string(a).unwrap(),
        fs::read_to_string(b).unwrap(),
        fs::read_to_string(c).unwrap(),
    );
    assert_eq!(a, c);
    assert_eq!(a.lines().nth(1).unwrap().split(',').nth(6), Some("2"));
    assert_eq!(b.lines().nth(1).unwrap().split(',').nth(6), Some("3"));
    assert_eq!(
        cli(&["simulate", "--config", arg(&dir.path().join("none.conf"))]),
        EXIT_USAGE
    );
}
