use std::path::Path;
use std::process::{Command, Output};

use refclass::synthgen::GeneratorSpec;

fn refclass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refclass")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn synth(dir: &Path) -> String {
    let spec = dir.join("spec.json");
    let g = GeneratorSpec::single_signal(80, 1970, 2009, 11);
    std::fs::write(&spec, serde_json::to_string(&g).unwrap()).unwrap();
    let out = dir.join("synth");
    ok(refclass(&["synth", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(out.join("sidecar.csv").exists());
    out.join("panel.csv").to_str().unwrap().to_string()
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth(dir.path());

    let report = ok(refclass(&[
        "forecast", "--panel", &panel, "--firm", "S00", "--year", "2000", "--horizon", "1", "--preset", "best-h1",
    ]));
    assert!(report.contains("class size"));
    assert!(report.contains("(40, 45]"));

    let outcomes = dir.path().join("outcomes.txt");
    let csv = ok(refclass(&[
        "forecast", "--panel", &panel, "--firm", "S00", "--year", "2000", "--horizon", "1", "--variables", "opmar",
        "--quantiles", "0.1,0.5,0.9", "--format", "csv", "--outcomes", outcomes.to_str().unwrap(),
    ]));
    assert_eq!(csv.lines().filter(|l| l.starts_with("quantile,")).count(), 3);
    let sorted: Vec<f64> = std::fs::read_to_string(&outcomes).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert!(sorted.len() >= 20 && sorted.windows(2).all(|w| w[0] <= w[1]));

    let estimates = dir.path().join("estimates.csv");
    std::fs::write(&estimates, "firm_id,year,horizon,estimate_pct\nS00,2000,1,4.0\nS00,2000,1,9.5\nS01,2001,1,-3\n").unwrap();
    let assessed = ok(refclass(&[
        "assess", "--panel", &panel, "--estimates", estimates.to_str().unwrap(), "--format", "csv",
    ]));
    let rows: Vec<&str> = assessed.lines().collect();
    assert_eq!(rows[0], "firm_id,year,horizon,estimate_pct,pit,class_size,coverage,warning");
    assert_eq!(rows.len(), 4);

    let track = ok(refclass(&[
        "track", "--panel", &panel, "--firm", "S03", "--from", "1995", "--to", "2008", "--horizon", "1", "--format", "csv",
    ]));
    assert_eq!(track.lines().count(), 15);

    let derived = dir.path().join("derived.csv");
    ok(refclass(&["derive", "--panel", &panel, "--out", derived.to_str().unwrap()]));
    let header = std::fs::read_to_string(&derived).unwrap().lines().next().unwrap().to_string();
    assert!(header.contains("salesGR_10") && header.contains("opmarDelta_1"));
}

#[test]
fn backtest_resume_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth(dir.path());
    let results = dir.path().join("results.csv");
    let config = dir.path().join("backtest.json");
    let spec = serde_json::json!({
        "panel": panel,
        "output": results,
        "horizons": [1],
        "windows": [10],
        "sizes": [0.05],
        "combinations": [["lard", false], ["union", true]],
        "algorithms": ["market_climate", "rank_deviation"],
        "variable_sets": [["opmar"], ["opmar", "at"]],
        "workers": 2
    });
    std::fs::write(&config, spec.to_string()).unwrap();
    ok(refclass(&["backtest", "--config", config.to_str().unwrap()]));
    let first = std::fs::read_to_string(&results).unwrap();
    // one market-climate row plus 2 sets x 2 variants
    assert_eq!(first.lines().count(), 1 + 5);
    ok(refclass(&["backtest", "--config", config.to_str().unwrap(), "--resume"]));
    assert_eq!(std::fs::read_to_string(&results).unwrap(), first);

    let top = ok(refclass(&["report", "--results", results.to_str().unwrap(), "--top", "2", "--format", "csv"]));
    assert_eq!(top.lines().count(), 3);

    let brute = ok(refclass(&[
        "search", "brute", "--horizon", "1", "--config", config.to_str().unwrap(),
    ]));
    // 127 subsets x 2 variants
    assert_eq!(brute.lines().count(), 1 + 254);
}

#[test]
fn exit_codes() {
    assert_eq!(refclass(&[]).status.code(), Some(1));
    assert_eq!(refclass(&["forecast", "--firm", "A", "--year", "2000", "--horizon", "1"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let panel = synth(dir.path());
    let absent = refclass(&["forecast", "--panel", &panel, "--firm", "NOPE", "--year", "2000", "--horizon", "1"]);
    assert_eq!(absent.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&absent.stderr).is_empty());
    assert!(absent.stdout.is_empty());
    let bad_alg = refclass(&["forecast", "--panel", &panel, "--firm", "S00", "--year", "2000", "--horizon", "1", "--algorithm", "x"]);
    assert_eq!(bad_alg.status.code(), Some(1));
}
