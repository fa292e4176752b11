use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use skyreach::baselines::{brute_force_optimize, BruteForceConfig};
use skyreach::objective::ProblemFile;

fn skyreach(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyreach"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = skyreach(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

fn small_market(out: &Path, extra: &[&str]) {
    let mut args = vec!["--seed", "4", "gen-data", "--airports", "6", "--routes", "8", "--months", "3"];
    args.extend_from_slice(extra);
    ok(out, &args);
}

/// A three-route problem over the generator's hidden models.
fn three_route_problem(dir: &Path) -> PathBuf {
    small_market(dir, &[]);
    let problem = dir.join("p3.json");
    let full = ProblemFile::load(&dir.join("problem.json")).unwrap();
    let routes: Vec<&str> = full.routes.iter().take(3).map(|r| r.id.as_str()).collect();
    ok(
        dir,
        &[
            "make-problem",
            "--panel",
            dir.to_str().unwrap(),
            "--routes",
            &routes.join(","),
            "--ground-truth",
            dir.join("ground_truth.json").to_str().unwrap(),
            "--output",
            problem.to_str().unwrap(),
        ],
    );
    problem
}

#[test]
fn gen_data_writes_the_panel() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    for f in ["airports.csv", "routes.csv", "observations.csv", "panel.json", "ground_truth.json", "problem.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let header = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("airports.csv"), "airport_id,name");
    assert_eq!(header("routes.csv"), "route_id,src_airport,dst_airport,f_max");
    assert_eq!(
        header("observations.csv"),
        "month,route_id,carrier_id,price,freq,delay_ratio,delay_min,cancel_ratio,divert_ratio,\
         fatal,serious,minor,aircraft_size,seat_avail,share,demand,unit_cost"
    );
}

#[test]
fn bad_generator_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"n_airports": 1}"#).unwrap();
    let o = skyreach(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_airports"));

    fs::write(&cfg, "{not json").unwrap();
    let o = skyreach(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn same_seed_writes_the_same_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_market(a.path(), &[]);
    small_market(b.path(), &[]);
    for f in ["airports.csv", "routes.csv", "observations.csv", "panel.json", "ground_truth.json", "problem.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn training_recovers_noiseless_shares() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "gen-data", "--airports", "6", "--routes", "6", "--months", "24", "--noise-std", "0"]);
    let panel = d.to_str().unwrap();
    ok(d, &["train", "--panel", panel, "--arch", "multilogit", "--epochs", "3000", "--lr", "3e-2"]);
    let summary = json(d.join("train_summary.json"));
    let median = summary["median_rmse"].as_f64().unwrap();
    assert!(median <= 1e-3, "{median}");
    assert!(d.join("models").read_dir().unwrap().count() > 0);

    let sub = d.join("sub");
    ok(&sub, &["train", "--panel", panel, "--features", "model1", "--epochs", "50"]);
    let features: Vec<u64> = json(sub.join("train_summary.json"))["features"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(features, (1..=8).collect::<Vec<_>>());
}

#[test]
fn missing_panel_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = skyreach(dir.path(), &["train", "--panel", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn brute_force_matches_the_library_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let problem = three_route_problem(dir.path());
    let out = dir.path().join("brute");
    ok(&out, &["optimize", "--problem", problem.to_str().unwrap(), "--method", "brute"]);
    let report = json(out.join("report.json"));

    let file = ProblemFile::load(&problem).unwrap();
    let p = file.build(&file.models).unwrap();
    let want = brute_force_optimize(&p, &BruteForceConfig::default()).unwrap();
    assert_eq!(report["objective"].as_f64().unwrap(), want.objective);
    let got: Vec<f64> = report["schedule"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["freq"].as_f64().unwrap())
        .collect();
    assert_eq!(got, want.schedule);
    assert!(out.join("trace.csv").is_file());
}

#[test]
fn zero_budget_gives_the_empty_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_market(d, &[]);
    let problem = d.join("zero.json");
    ok(
        d,
        &[
            "make-problem",
            "--panel",
            d.to_str().unwrap(),
            "--budget",
            "0",
            "--ground-truth",
            d.join("ground_truth.json").to_str().unwrap(),
            "--output",
            problem.to_str().unwrap(),
        ],
    );
    let out = d.join("run");
    ok(&out, &["optimize", "--problem", problem.to_str().unwrap(), "--method", "aga-relu", "--min-epochs", "20"]);
    let report = json(out.join("report.json"));
    assert_eq!(report["feasible"], Value::Bool(true));
    assert_eq!(report["zero_schedule"], Value::Bool(true));

    let file = ProblemFile::load(&problem).unwrap();
    let p = file.build(&file.models).unwrap();
    assert_eq!(report["objective"].as_f64().unwrap(), p.influence(&vec![0.0; p.n_routes()]).unwrap());
}

#[test]
fn unknown_method_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = skyreach(dir.path(), &["optimize", "--problem", "p.json", "--method", "simplex"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for m in ["aga-lagrange", "aga-relu", "greedy", "brute"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn benchmark_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let problem = three_route_problem(dir.path());
    let out = dir.path().join("bench");
    ok(
        &out,
        &["benchmark", "--problems", problem.to_str().unwrap(), "--methods", "aga-relu,greedy", "--reps", "3"],
    );
    let mut rows = csv::Reader::from_path(out.join("benchmark.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (method, runtime, feasible) = (col("method"), col("runtime_ms"), col("feasible"));
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 6);
    for r in records.iter().filter(|r| &r[method] == "aga-relu") {
        assert!(r[runtime].parse::<f64>().unwrap() > 0.0);
        assert_eq!(&r[feasible], "true");
    }
    assert_eq!(records.iter().filter(|r| &r[method] == "greedy").count(), 3);
}
