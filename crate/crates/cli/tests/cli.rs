//! End-to-end tests of the `svydid` binary: exit codes, reproducibility,
//! and the estimation ladder on a deterministic fixture.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn svydid(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svydid"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// 31 strata x 2 PSUs x 4 units x 2 periods; one PSU per stratum is
/// treated in period 2. Outcomes and weights are deterministic, and the
/// weights correlate with the unit effect size, so weighted and
/// unweighted ATTs differ.
fn ladder_csv(equal_weights: bool) -> String {
    let mut s = String::from("unit,period,y,first_treat,weight,stratum,psu\n");
    let mut uid = 0usize;
    for h in 0..31 {
        for p in 0..2 {
            let treated = p == 0;
            let g = if treated { 2 } else { 0 };
            for k in 0..4 {
                let base = (uid as f64 * 0.7).sin();
                let effect = 1.0 + 0.8 * (uid as f64 * 0.6).cos();
                let shock = 0.3 * ((h * 2 + p) as f64 * 1.3).sin();
                let w = if equal_weights {
                    1.0
                } else {
                    1.0 + 0.9 * (uid as f64 * 0.6).cos()
                };
                for t in 1..=2 {
                    let mut y = base + 0.2 * t as f64 + if t == 2 { shock } else { 0.0 };
                    if treated && t == 2 {
                        y += effect;
                    }
                    s.push_str(&format!("u{uid},{t},{y},{g},{w},s{h},p{h}_{p}\n"));
                }
                let _ = k;
                uid += 1;
            }
        }
    }
    s
}

#[test]
fn simulate_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = svydid(
        &["simulate", "--scenario", "s1", "--n", "400", "--reps", "5", "--out", "rec"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    assert!(!dir.path().join("rec").join("s1_cs_reg_400.jsonl").exists());
}

#[test]
fn simulate_same_seed_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for rec in ["a", "b"] {
        let out = svydid(
            &[
                "simulate", "--scenario", "s1", "--estimator", "cs_reg", "--n", "400",
                "--reps", "8", "--seed", "11", "--out", rec,
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.path().join("a/s1_cs_reg_400.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b/s1_cs_reg_400.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn report_merges_and_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let out = svydid(
        &[
            "simulate", "--scenario", "s1,s2", "--estimator", "cs_reg", "--n", "400",
            "--reps", "8", "--seed", "3", "--out", "rec",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let merged = svydid(
        &[
            "report", "rec/s2_cs_reg_400.jsonl", "rec/s1_cs_reg_400.jsonl",
            "--out", "table.txt",
        ],
        dir.path(),
    );
    assert_eq!(code(&merged), 0);
    let table = fs::read_to_string(dir.path().join("table.txt")).unwrap();
    let s1_pos = table.find("s1").unwrap();
    let s2_pos = table.find("s2").unwrap();
    assert!(s1_pos < s2_pos, "rows must be sorted by scenario");

    let dup = svydid(
        &["report", "rec/s1_cs_reg_400.jsonl", "rec/s1_cs_reg_400.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&dup), 3);
    assert!(String::from_utf8_lossy(&dup.stderr).contains("duplicate cell"));
}

#[test]
fn estimate_missing_column_is_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), ladder_csv(true)).unwrap();
    let out = svydid(
        &[
            "estimate", "--input", "d.csv", "--outcome", "y", "--unit", "unit",
            "--time", "period", "--first-treat", "first_treat", "--weights", "wrong",
            "--out", "r.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("wrong"));
    assert!(!dir.path().join("r.json").exists(), "no partial output on failure");
}

#[test]
fn estimate_malformed_csv_is_exit_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "a,b\n1\n").unwrap();
    let out = svydid(
        &[
            "estimate", "--input", "bad.csv", "--outcome", "a", "--unit", "b",
            "--time", "a", "--first-treat", "b", "--out", "r.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 3);
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn ladder_on_design_fixture() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), ladder_csv(false)).unwrap();
    let out = svydid(
        &[
            "estimate", "--input", "d.csv", "--outcome", "y", "--unit", "unit",
            "--time", "period", "--first-treat", "first_treat", "--weights", "weight",
            "--strata", "stratum", "--psu", "psu", "--ladder", "--out", "ladder.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ladder.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    let rows = v["results"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let specs: Vec<&str> = rows.iter().map(|r| r["spec"].as_str().unwrap()).collect();
    assert_eq!(
        specs,
        ["naive", "weights_only", "full_design", "full_design_covariates"]
    );
    let att = |i: usize| rows[i]["att"].as_f64().unwrap();
    let se = |i: usize| rows[i]["se"].as_f64().unwrap();
    // Informative weights shift the point estimate.
    assert!((att(0) - att(1)).abs() > 0.02);
    // Accounting for clustering and stratification widens the interval.
    assert!(se(2) > se(1));
    // Design degrees of freedom: 62 PSUs - 31 strata.
    assert_eq!(rows[2]["df"].as_u64().unwrap(), 31);
}

#[test]
fn equal_weights_ladder_matches_naive_att() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), ladder_csv(true)).unwrap();
    let out = svydid(
        &[
            "estimate", "--input", "d.csv", "--outcome", "y", "--unit", "unit",
            "--time", "period", "--first-treat", "first_treat", "--weights", "weight",
            "--strata", "stratum", "--psu", "psu", "--ladder", "--out", "ladder.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ladder.json")).unwrap()).unwrap();
    let rows = v["results"].as_array().unwrap();
    let naive = rows[0]["att"].as_f64().unwrap();
    let full = rows[2]["att"].as_f64().unwrap();
    assert!((naive - full).abs() < 1e-10, "equal weights: {naive} vs {full}");
}

#[test]
fn jackknife_replicate_matches_design_se() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), ladder_csv(false)).unwrap();
    let common = [
        "estimate", "--input", "d.csv", "--outcome", "y", "--unit", "unit",
        "--time", "period", "--first-treat", "first_treat", "--weights", "weight",
        "--strata", "stratum", "--psu", "psu",
    ];
    let mut design_args: Vec<&str> = common.to_vec();
    design_args.extend(["--mode", "design", "--out", "design.json"]);
    let mut rep_args: Vec<&str> = common.to_vec();
    rep_args.extend(["--mode", "replicate", "--jkn", "--out", "rep.json"]);
    for args in [&design_args, &rep_args] {
        let out = svydid(args, dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |name: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join(name)).unwrap()).unwrap()
    };
    let se_design = read("design.json")["results"][0]["se"].as_f64().unwrap();
    let se_rep = read("rep.json")["results"][0]["se"].as_f64().unwrap();
    // Without FPCs the stratified jackknife reproduces the linearized SE.
    assert!(
        (se_design - se_rep).abs() <= 1e-8 * se_design,
        "{se_design} vs {se_rep}"
    );
}
