use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn effport(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effport")).args(args).current_dir(dir).output().expect("run effport")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

const STUDIES: &str = "meta_id,study_id,t_events,t_total,c_events,c_total
m1,s1,10,100,20,100
m1,s2,15,120,30,118
m1,s3,0,50,4,52
m1,s4,22,200,35,190
m1,s5,8,80,9,75
m1,s6,30,150,50,160
";

#[test]
fn empty_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.csv"), "meta_id,study_id,t_events,t_total,c_events,c_total\n").unwrap();
    let out = effport(&["measures", "-i", "empty.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert!(err["error"]["message"].as_str().unwrap().contains("no studies"));
    assert_eq!(err["error"]["exit_code"], 3);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = effport(&["meta", "-i", "absent.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), STUDIES).unwrap();
    for args in [
        &["measures", "--no-such-flag"][..],
        &["measures", "-i", "s.csv", "--level", "1.5"],
        &["meta", "-i", "s.csv", "--method", "bayes"],
        &["corpus", "simulate", "--mechanism", "constant-rr", "--effect", "5"],
    ] {
        let out = effport(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
    }
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = effport(
            &["corpus", "simulate", "--mechanism", "constant-rr", "--seed", "42", "--n-meta", "50", "-o", name],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.path().join(name)).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let meta: Value = serde_json::from_slice(&fs::read(dir.path().join("a.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 42);
    assert_eq!(meta["config"]["mechanism"], "constant-rr");
}

#[test]
fn measures_json_has_envelope_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), STUDIES).unwrap();
    let out = effport(&["measures", "-i", "s.csv", "--measure", "or,rd"], dir.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "measures");
    let rows = v["result"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    let s1_or = &rows[0];
    assert_eq!(s1_or["measure"], "or");
    let expected = (10.0 * 80.0) / (90.0 * 20.0);
    assert!((s1_or["point"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(rows[4]["study_id"], "s3");
    assert_eq!(rows[4]["corrected"], true);
}

#[test]
fn meta_writes_output_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), STUDIES).unwrap();
    let out = effport(
        &["meta", "-i", "s.csv", "--measure", "rr", "--method", "dl", "--plot", "f.svg", "-o", "m.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    let fit = &v["result"][0]["fit"];
    assert_eq!(fit["k"], 6);
    let p = fit["pooled"]["point"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(fs::read_to_string(dir.path().join("f.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn corr_reports_all_measures() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), STUDIES).unwrap();
    let out = effport(&["corr", "-i", "s.csv", "--format", "csv"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",ok")));
}

#[test]
fn corpus_analyze_round_trip_through_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let out = effport(&["corpus", "simulate", "--mechanism", "constant-or", "--n-meta", "30", "-o", "c.csv"], dir.path());
    assert!(out.status.success());
    let out = effport(
        &["corpus", "analyze", "-i", "c.csv", "--format", "csv", "-o", "r.csv", "--summary", "s.json", "--plot", "p.svg"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(records.lines().count(), 31);
    let s: Value = serde_json::from_slice(&fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(s["result"]["summaries"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("p.svg").exists());
}

#[test]
fn repro_table1_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = effport(&["repro", "table1"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Table 1: 36/36 values match"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn repro_table2_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = effport(&["repro", "table2", "--format", "json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["result"]["comparisons"].as_array().unwrap().len(), 36);
}

#[test]
fn bglmm_small_meta_analysis() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), STUDIES).unwrap();
    let out = effport(
        &["bglmm", "-i", "s.csv", "--draws", "200", "--grid-points", "9", "--format", "csv", "-o", "b.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 9);
    assert!(dir.path().join("b.csv.meta.json").exists());
}

#[test]
fn bglmm_too_few_studies_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), STUDIES).unwrap();
    let out = effport(&["bglmm", "-i", "s.csv", "--min-studies", "10"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}
