use bifactor::io::{parse_model_json, ModelSpec};
use bifactor::{fixtures, AnyParams, Link};
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bifactor")).args(args).output().unwrap()
}

fn run_spec(cmd: &str, name: &str, extra: &[&str]) -> Output {
    let path = spec(name);
    let mut args = vec![cmd, path.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bifactor-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn shipped_specs_match_fixtures() {
    let load = |n: &str| parse_model_json(&std::fs::read_to_string(spec(n)).unwrap()).unwrap().to_params().unwrap();
    for id in 1..=6 {
        assert_eq!(load(&format!("case{id}")), AnyParams::Restricted(fixtures::case(id, Link::Probit).unwrap()));
        assert_eq!(load(&format!("case{id}-linear")), AnyParams::Restricted(fixtures::case(id, Link::Linear).unwrap()));
    }
    assert_eq!(load("two-testlet-1"), AnyParams::Restricted(fixtures::two_testlet(1)));
    assert_eq!(load("two-tier-example3"), AnyParams::Restricted(fixtures::example3()));
}

#[test]
fn check_exit_codes() {
    let out = run_spec("check", "case1", &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["rule"], "P1");
    let out = run_spec("check", "case5", &[]);
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["rule"], "E2N-violated");
    assert!(v["evidence"]["q_sizes"].is_array());
    assert_eq!(run_spec("check", "two-testlet-2", &[]).status.code(), Some(3));
    assert_eq!(run_spec("check", "case6", &[]).status.code(), Some(0));
}

#[test]
fn undetermined_without_probe() {
    let out = run_spec("check", "two-tier-example3", &["--no-probe"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["status"], "undetermined");
}

#[test]
fn parse_errors_and_invariants() {
    let dir = scratch("bad");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(run(&["check", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(&["check", dir.join("missing.json").to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(&["check", spec("case1").to_str().unwrap(), "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    // A Σ that is not positive definite.
    let mut s: ModelSpec = parse_model_json(&std::fs::read_to_string(spec("case5")).unwrap()).unwrap();
    s.sigma = Some(vec![vec![1.0, 2.0, 0.0], vec![2.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let invalid = dir.join("invalid.json");
    std::fs::write(&invalid, serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(run(&["check", invalid.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn certificates() {
    let out = run_spec("certificate", "case5", &[]);
    assert_eq!(out.status.code(), Some(3));
    let c = json(&out);
    assert_eq!(c["construction"], "rho-perturbation");
    assert!(c["moment_distance"].as_f64().unwrap() < 1e-8);
    assert!(c["param_distance"].as_f64().unwrap() > 1e-3);

    let out = run_spec("certificate", "two-testlet-1", &["--construction", "case2c"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["construction"], "case2c");

    let out = run_spec("certificate", "case1-rho", &["--construction", "theorem10"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // Identifiable: auto refuses, an explicit construction is rejected.
    let out = run_spec("certificate", "case1", &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    assert_eq!(run_spec("certificate", "case1", &["--construction", "scaling"]).status.code(), Some(2));
    assert_eq!(run_spec("certificate", "case1", &["--construction", "nope"]).status.code(), Some(1));
}

#[test]
fn moments_json_and_csv() {
    let out = run_spec("moments", "case1", &[]);
    assert_eq!(out.status.code(), Some(0));
    let m = json(&out);
    assert_eq!(m["link"], "probit");
    let t = m["thresholds"][0].as_f64().unwrap();
    assert!((t + 1.51 / 6f64.sqrt()).abs() < 1e-12);
    let out = run_spec("moments", "case1-linear", &["--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("item,mean,item1,"));
    assert_eq!(text.lines().count(), 31);
}

#[test]
fn simulate_then_fit() {
    let dir = scratch("fit");
    let data = dir.join("y.csv");
    let out = run_spec("simulate", "case1", &["--n", "500", "--seed", "4", "--out", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("y.json")).unwrap()).unwrap();
    assert_eq!((side["seed"].as_u64(), side["n"].as_u64()), (Some(4), Some(500)));
    let again = run_spec("simulate", "case1", &["--n", "500", "--seed", "4"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), std::fs::read_to_string(&data).unwrap());

    let fit = |seed: &str| {
        run(&["fit", data.to_str().unwrap(), spec("case1").to_str().unwrap(), "--n-iter", "60", "--burn-in", "30", "--seed", seed])
    };
    let a = fit("2");
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let f = json(&a);
    assert_eq!(f["iterations"], 60);
    assert_eq!(f["estimates"]["A"].as_array().unwrap().len(), 30);
    assert_eq!(a.stdout, fit("2").stdout);
    assert_eq!(run(&["fit", data.to_str().unwrap(), spec("case1").to_str().unwrap(), "--n-iter", "10", "--burn-in", "20"]).status.code(), Some(2));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn bench_smoke_run() {
    let dir = scratch("bench");
    let csv = dir.join("rmse.csv");
    let args = ["bench", "--case", "1", "--reps", "1", "--n", "1000", "--n-iter", "40", "--burn-in", "20", "--csv", csv.to_str().unwrap()];
    let a = run(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let r = json(&a);
    assert_eq!(r["N"], serde_json::json!([1000]));
    assert_eq!(r["verdict"]["rule"], "P1");
    assert_eq!(r["rows"][0]["completed"], 1);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("case,link,N,group,rmse\n1,probit,1000,a,"));
    let mut b = json(&run(&args));
    let mut a = r;
    a.as_object_mut().unwrap().remove("timing");
    b.as_object_mut().unwrap().remove("timing");
    assert_eq!(a, b);

    let r = json(&run(&["bench", "--case", "2", "--reps", "1", "--n", "300", "--n-iter", "20", "--burn-in", "10"]));
    assert_eq!(r["verdict"]["status"], "non_identifiable");
    assert!(r["certificate"]["construction"].is_string());
    assert_eq!(run(&["bench", "--case", "9", "--reps", "1"]).status.code(), Some(1));
    std::fs::remove_dir_all(&dir).unwrap();
}
