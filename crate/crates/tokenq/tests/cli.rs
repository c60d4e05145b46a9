// End-to-end runs of the `tokenq` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tokenq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenq")).args(args).env_remove("TOKENQ_SEED").output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_table_fixture() {
    let out = tempfile::tempdir().unwrap();
    let input = configs().join("calibration_single.csv");
    let o = tokenq(&["fit", "--input", s(&input), "--mode", "single", "--out-dir", s(out.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.path().join("model.json"));
    assert_eq!(m["model"]["kind"], "single");
    assert!((m["model"]["a"].as_f64().unwrap() - 0.0230).abs() < 5e-4);
    assert!((m["model"]["c"].as_f64().unwrap() - 0.19).abs() < 0.01);
    let manifest = json(&out.path().join("manifest.json"));
    assert_eq!(manifest["manifest_hash"], m["manifest_hash"]);
}

#[test]
fn fit_two_points_exact() {
    let dir = tempfile::tempdir().unwrap();
    let input =
        write(dir.path(), "c.csv", "input_tokens,output_tokens,batch_size,latency_s\n10,100,1,1.5\n10,300,1,3.5\n");
    let out = dir.path().join("out");
    assert!(tokenq(&["fit", "--input", s(&input), "--out-dir", s(&out)]).status.success());
    let m = json(&out.join("model.json"));
    assert!((m["model"]["a"].as_f64().unwrap() - 0.01).abs() < 1e-12);
    assert!((m["model"]["c"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(m["max_abs_residual"].as_f64().unwrap() < 1e-12);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let flat =
        write(dir.path(), "flat.csv", "input_tokens,output_tokens,batch_size,latency_s\n10,100,1,1.5\n10,100,1,1.6\n");
    assert_eq!(tokenq(&["fit", "--input", s(&flat), "--out-dir", s(&out)]).status.code(), Some(2));
    assert!(!out.join("model.json").exists(), "no partial output on failure");

    let missing = dir.path().join("nope.toml");
    assert_eq!(tokenq(&["analyze", "--config", s(&missing), "--out-dir", s(&out)]).status.code(), Some(2));
    let bad = write(dir.path(), "bad.toml", "[workload]\nlambda = 1\n");
    assert_eq!(tokenq(&["analyze", "--config", s(&bad), "--out-dir", s(&out)]).status.code(), Some(2));
    assert_eq!(tokenq(&["analyze", "--config"]).status.code(), Some(2));

    let overloaded = write(
        dir.path(),
        "over.toml",
        "[workload]\nlambda = 2\ndistribution = { kind = \"deterministic\", tokens = 100 }\n\
         [latency]\nkind = \"single\"\na = 0.01\nc = 0\n",
    );
    assert_eq!(tokenq(&["analyze", "--config", s(&overloaded), "--out-dir", s(&out)]).status.code(), Some(3));
    assert_eq!(
        tokenq(&["optimize", "--objective", "v1", "--config", s(&overloaded), "--out-dir", s(&out)]).status.code(),
        Some(3)
    );
}

#[test]
fn analyze_md1() {
    let out = tempfile::tempdir().unwrap();
    let o = tokenq(&["analyze", "--config", s(&configs().join("md1.toml")), "--out-dir", s(out.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), tokenq::commands::SWEEP_HEADER.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[6].parse::<f64>().unwrap(), 0.5);
}

#[test]
fn analyze_token_sweep_is_monotone_and_batch_curve_peaks() {
    let out = tempfile::tempdir().unwrap();
    assert!(tokenq(&["analyze", "--config", s(&configs().join("token_limit_v1.toml")), "--out-dir", s(out.path())])
        .status
        .success());
    let csv = std::fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    let waits: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(6).unwrap().parse().unwrap()).collect();
    assert_eq!(waits.len(), 26);
    assert!(waits.windows(2).all(|w| w[1] > w[0]));

    let out = tempfile::tempdir().unwrap();
    assert!(tokenq(&[
        "analyze",
        "--config",
        s(&configs().join("batching_lognormal.toml")),
        "--out-dir",
        s(out.path())
    ])
    .status
    .success());
    let report = json(&out.path().join("report.json"));
    assert_eq!(report["throughput"]["shape"]["shape"], "interior_maximum");
    assert!(out.path().join("throughput.csv").exists());
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("mm1.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = tokenq(&["simulate", "--config", s(&cfg), "--seed", "42", "--reps", "4", "--out-dir", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["stats.json", "trace.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let stats = json(&a.join("stats.json"));
    assert_eq!(stats["seed"], 42);
    assert_eq!(stats["replications"], 4);
    let ma = json(&a.join("manifest.json"));
    let mb = json(&b.join("manifest.json"));
    assert_eq!(ma["manifest_hash"], mb["manifest_hash"]);
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["manifest_hash"], stats["manifest_hash"]);

    let c = dir.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_tokenq"))
        .args(["simulate", "--config", s(&cfg), "--reps", "4", "--out-dir", s(&c)])
        .env("TOKENQ_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(a.join("stats.json")).unwrap(), std::fs::read(c.join("stats.json")).unwrap());
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), tokenq::commands::TRACE_HEADER.join(","));
}

#[test]
fn simulate_mm1_covers_one() {
    let out = tempfile::tempdir().unwrap();
    assert!(tokenq(&["simulate", "--config", s(&configs().join("mm1.toml")), "--out-dir", s(out.path())])
        .status
        .success());
    let st = json(&out.path().join("stats.json"));
    let (m, h) = (st["mean_wait"]["mean"].as_f64().unwrap(), st["mean_wait"]["ci_half_width"].as_f64().unwrap());
    assert!((m - 1.0).abs() <= h, "{m} +- {h}");
}

#[test]
fn optimize_writes_sweeps() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("token_limit_v2.toml");
    assert!(tokenq(&["optimize", "--config", s(&cfg), "--out-dir", s(out.path())]).status.success());
    let opt = json(&out.path().join("optimum.json"));
    assert_eq!(opt["interior"], true);
    let csv = std::fs::read_to_string(out.path().join("token_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);

    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("batching_lognormal.toml");
    assert!(tokenq(&["optimize", "--objective", "batch", "--config", s(&cfg), "--out-dir", s(out.path())])
        .status
        .success());
    assert!(json(&out.path().join("optimum.json"))["b_star"].as_u64().unwrap() >= 1);
}

#[test]
fn compare_heavy_tail_caps_batches() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("batching_lognormal.toml");
    let o = tokenq(&["compare", "--simulate", "--reps", "3", "--config", s(&cfg), "--out-dir", s(out.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.path().join("comparison.json"));
    let top = doc["comparisons"].as_array().unwrap().last().unwrap().clone();
    let wait = |name: &str| {
        let row = top["rows"].as_array().unwrap().iter().find(|r| r["name"] == name).unwrap().clone();
        row["simulated"]["mean_wait"]["mean"].as_f64().unwrap()
    };
    assert!(wait("dynamic_capped") < wait("dynamic"));
    assert!(wait("elastic") < wait("dynamic_capped"));
    let csv = std::fs::read_to_string(out.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), tokenq::commands::COMPARISON_HEADER.join(","));
}
