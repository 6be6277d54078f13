use std::fs;
use std::path::Path;
use std::process::Command;

use funcgp::experiment::score;
use funcgp::io::{read_dataset, read_metrics, read_prediction};

fn bin(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_funcgp")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn ok(args: &[&str]) -> String {
    let (code, text) = bin(args);
    assert_eq!(code, 0, "{args:?}: {text}");
    text
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_reproducible_with_default_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--kind", "freg", "--seed", "9", "--out", p(&a)]);
    ok(&["simulate", "--kind", "freg", "--seed", "9", "--out", p(&b)]);
    for f in ["train/X.csv", "train/Y.csv", "train/W.csv", "test/Y.csv", "test/meta.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = read_dataset(&a.join("train")).unwrap();
    let test = read_dataset(&a.join("test")).unwrap();
    assert_eq!((train.n_curves(), test.n_curves(), train.n_times()), (30, 200, 40));
    assert_eq!(train.meta["tau2"], "0.2");
}

#[test]
fn pipeline_and_evaluate_match_in_process_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let fit = dir.path().join("fit");
    let pred = dir.path().join("pred.csv");
    let metrics = dir.path().join("metrics.csv");
    ok(&["simulate", "--n", "10", "--n-test", "8", "--times", "6", "--seed", "2", "--out", p(&d)]);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "kind=pp\nm=4\nq=3\nchains=2\niters=200\nburnin=50\n").unwrap();
    let train = d.join("train");
    let test = d.join("test");
    ok(&["fit", "--config", p(&cfg), "--data", p(&train), "--out", p(&fit)]);
    let summary = fs::read_to_string(fit.join("summary.csv")).unwrap();
    assert!(summary.starts_with("model,s2,s2_lower,s2_upper"));
    assert!(summary.lines().nth(1).unwrap().starts_with("pp,"));

    let args = ["predict", "--data", p(&train), "--test", p(&test), "--fit", p(&fit), "--method", "pp_mod1", "--seed", "4", "--out", p(&pred)];
    ok(&args);
    let first = fs::read(&pred).unwrap();
    ok(&args);
    assert_eq!(first, fs::read(&pred).unwrap());

    let (code, text) = bin(&["predict", "--data", p(&train), "--test", p(&test), "--fit", p(&fit), "--method", "pp_mod2", "--out", p(&pred)]);
    assert_eq!(code, 1, "{text}");

    ok(&["evaluate", "--pred", &format!("mod1={}", p(&pred)), "--test", p(&test), "--out", p(&metrics)]);
    let rows = read_metrics(&metrics).unwrap();
    let s = score(&read_prediction(&pred).unwrap(), &read_dataset(&test).unwrap()).unwrap();
    assert_eq!(rows[0].method, "mod1");
    assert!((rows[0].mse - s.mse).abs() < 1e-12);
    assert!((rows[0].coverage - s.coverage).abs() < 1e-12);
    assert!((rows[0].mean_length - s.mean_length).abs() < 1e-12);

    let depth = dir.path().join("depth.csv");
    let out = ok(&["depth", "--train", p(&train), "--test", p(&test), "--pred", p(&pred), "--out", p(&depth)]);
    assert!(out.starts_with("pearson"));
    assert_eq!(fs::read_to_string(&depth).unwrap().lines().count(), 9);
}

#[test]
fn bench_on_trivial_size() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["simulate", "--n", "2", "--n-test", "1", "--times", "2", "--out", p(&d)]);
    let report = dir.path().join("bench.csv");
    ok(&["bench", "--data", p(&d.join("train")), "--reps", "2", "--out", p(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path,n_obs,seconds_per_eval,speedup_vs_dense");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[1], "4");
        assert!(f[2].parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["fit", "--no-such-flag"]).0, 1);
    assert_eq!(bin(&["frobnicate"]).0, 1);
    let missing = dir.path().join("missing");
    assert_eq!(bin(&["fit", "--data", p(&missing), "--out", p(dir.path())]).0, 2);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "chainz=3\n").unwrap();
    assert_eq!(bin(&["fit", "--config", p(&cfg), "--data", p(&missing)]).0, 1);
    let d = dir.path().join("d");
    ok(&["simulate", "--n", "3", "--n-test", "1", "--times", "3", "--out", p(&d)]);
    fs::write(d.join("train/Y.csv"), "t1,t2,t3\n1,2,x\n1,2,3\n1,2,3\n").unwrap();
    let (code, text) = bin(&["fit", "--data", p(&d.join("train")), "--out", p(dir.path())]);
    assert_eq!(code, 2);
    assert!(text.contains("row 1, column 3"), "{text}");
}
