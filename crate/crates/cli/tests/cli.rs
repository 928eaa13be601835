use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mvu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvu")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn help_lists_subcommands() {
    let o = mvu(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["design", "check", "privatize", "account", "simulate-dme", "budget-sweep"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn bad_flags_are_validation_errors() {
    assert_eq!(code(&mvu(&["design", "--mechanism", "grr", "--epsilon", "1", "--bout", "2", "--bogus"])), 2);
    assert_eq!(code(&mvu(&["design", "--mechanism", "grr", "--epsilon", "1", "--bout", "2"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "t.json");
    assert_eq!(code(&mvu(&["design", "--mechanism", "grr", "--epsilon", "-1", "--bout", "2", "--out", &out])), 2);
    assert_eq!(
        code(&mvu(&["design", "--mechanism", "brr", "--epsilon", "1", "--bin", "3", "--bout", "2", "--out", &out])),
        2
    );
}

#[test]
fn designed_table_passes_check_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let table = path(dir.path(), "grr.json");
    let o = mvu(&["design", "--mechanism", "grr", "--epsilon", "1", "--bout", "3", "--out", &table]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = path(dir.path(), "report.json");
    assert_eq!(code(&mvu(&["check", &table, "--out", &report])), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["report"]["valid"], Value::Bool(true));

    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(doc["provenance"]["config"]["mechanism"], "grr");
    doc["P"][0][0] = Value::from(0.9);
    let bad = path(dir.path(), "bad.json");
    fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = mvu(&["check", &bad]);
    assert_eq!(code(&o), 2);
    // A looser bias tolerance does not excuse the broken row sum.
    assert_eq!(code(&mvu(&["check", &bad, "--tol-bias", "10"])), 2);

    fs::write(&bad, "{\"version\": 1}").unwrap();
    assert_eq!(code(&mvu(&["check", &bad])), 2);
}

#[test]
fn mvu_design_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let table = path(dir.path(), "mvu.json");
    let o = mvu(&["design", "--mechanism", "mvu-metric", "--epsilon", "2", "--bin", "2", "--bout", "2", "--seed", "7", "--out", &table]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(doc["privacy"]["kind"], "metric");
    assert_eq!(doc["provenance"]["config"]["seed"], 7);
    assert_eq!(doc["tool"]["name"], "mvu");
    assert_eq!(code(&mvu(&["check", &table])), 0);
}

#[test]
fn privatize_writes_framed_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let table = path(dir.path(), "t.json");
    assert_eq!(code(&mvu(&["design", "--mechanism", "grr", "--epsilon", "2", "--bout", "3", "--out", &table])), 0);
    let input = path(dir.path(), "x.csv");
    fs::write(&input, "# three clients\n0.1, -0.2, 0.3\n0,0,0\n-0.5,0.25,0.25\n").unwrap();
    let out = path(dir.path(), "p.bin");
    let o = mvu(&["privatize", "--table", &table, "--input", &input, "--p", "1", "--sensitivity", "1", "--seed", "3", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"MVUP");
    assert_eq!(bytes.len(), 14 + 3 * 2);
    let again = path(dir.path(), "q.bin");
    mvu(&["privatize", "--table", &table, "--input", &input, "--seed", "3", "--out", &again]);
    assert_eq!(bytes, fs::read(&again).unwrap());
    let meta: Value = serde_json::from_str(&fs::read_to_string(format!("{out}.json")).unwrap()).unwrap();
    assert_eq!(meta["count"], 3);

    // Eight levels are too coarse for the norm-preserving dither; 32 suffice.
    let np = path(dir.path(), "np.bin");
    assert_eq!(
        code(&mvu(&["privatize", "--table", &table, "--input", &input, "--norm-preserving", "--out", &np])),
        2
    );
    let fine = path(dir.path(), "fine.json");
    assert_eq!(code(&mvu(&["design", "--mechanism", "grr", "--epsilon", "2", "--bout", "5", "--out", &fine])), 0);
    assert_eq!(
        code(&mvu(&["privatize", "--table", &fine, "--input", &input, "--norm-preserving", "--out", &np])),
        0
    );
    let meta: Value = serde_json::from_str(&fs::read_to_string(format!("{np}.json")).unwrap()).unwrap();
    assert!(meta["gamma"].as_f64().unwrap() < 1.0);

    fs::write(&input, "0.9,0.9,0\n").unwrap();
    assert_eq!(code(&mvu(&["privatize", "--table", &table, "--input", &input, "--out", &out])), 2);
    fs::write(&input, "0.1,abc\n").unwrap();
    assert_eq!(code(&mvu(&["privatize", "--table", &table, "--input", &input, "--out", &out])), 2);
}

#[test]
fn account_writes_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let table = path(dir.path(), "t.json");
    assert_eq!(code(&mvu(&["design", "--mechanism", "brr", "--epsilon", "1", "--bout", "2", "--out", &table])), 0);
    let ledger = path(dir.path(), "l.json");
    for method in ["greedy", "lp", "exact"] {
        let o = mvu(&[
            "account", "--table", &table, "--metric-p", "1", "--sensitivity", "0.5", "--dim", "2", "--steps", "10",
            "--delta", "1e-4", "--method", method, "--out", &ledger,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let doc: Value = serde_json::from_str(&fs::read_to_string(&ledger).unwrap()).unwrap();
        assert!(doc["ledger"]["epsilon"].as_f64().unwrap().is_finite());
        assert_eq!(doc["config"]["method"], method);
    }
    let o = mvu(&["account", "--table", &table, "--delta", "2", "--out", &ledger]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = path(dir.path(), "a.csv");
    let b = path(dir.path(), "b.csv");
    for out in [&a, &b] {
        let o = mvu(&[
            "simulate-dme", "--mode", "vector-l1", "--baseline", "laplace", "--baseline", "gaussian", "--n", "500", "--d", "8",
            "--epsilons", "1,2", "--trials", "3", "--seed", "5", "--out", out,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(text.contains("mode,mechanism,epsilon,delta,bits_per_coord,trial,mse,stderr,seed"));
    assert_eq!(text.lines().filter(|l| l.starts_with("vector-l1,laplace")).count(), 6);
    assert!(text.lines().any(|l| l.starts_with("vector-l1,gaussian,1,0.00001,inf,")));

    let table = path(dir.path(), "t.json");
    assert_eq!(code(&mvu(&["design", "--mechanism", "grr", "--epsilon", "2", "--bout", "2", "--out", &table])), 0);
    let s = path(dir.path(), "s.csv");
    let o = mvu(&["simulate-dme", "--mode", "scalar", "--table", &table, "--n", "1000", "--trials", "2", "--x", "-0.5,0.5", "--out", &s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&s).unwrap().contains("scalar,generalized-rr,2,,2,1,"));
    assert_eq!(code(&mvu(&["simulate-dme", "--mode", "scalar", "--baseline", "laplace", "--out", &s])), 2);
}

#[test]
fn budget_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "sweep.csv");
    let o = mvu(&["budget-sweep", "--epsilon", "2", "--bin", "2", "--bouts", "1,2", "--n", "500", "--trials", "2", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "b_out,objective,converged,mse,diagnostic");
    let obj: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(obj[1] <= obj[0]);
}
