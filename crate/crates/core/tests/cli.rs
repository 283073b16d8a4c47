//! End-to-end runs of the `gpstruct` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gpstruct::io::{parse_csv, PredictionTable};
use serde_json::Value;

const QUICK: [&str; 6] = [
    "--set",
    "schedule.sweeps=4",
    "--set",
    "schedule.hyper_steps=3",
    "--set",
    "schedule.structure_steps=3",
];

fn gpstruct(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpstruct"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = gpstruct(args, out);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synthetic_data_fits_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    ok(
        &[
            "synth-data",
            "--seed",
            "3",
            "--set",
            "synth.kind=linear",
            "--set",
            "synth.n=30",
        ],
        &data_dir,
    );
    let csv = data_dir.join("linear.csv");
    let table = parse_csv(&fs::read_to_string(&csv).unwrap())
        .unwrap()
        .into_single()
        .unwrap();
    assert_eq!(table.len(), 30);

    let out = dir.path().join("fit");
    let mut args = vec!["predict", "--data", csv.to_str().unwrap(), "--chains", "2"];
    args.extend(QUICK);
    args.extend([
        "--set",
        "holdout.fraction=0.2",
        "--set",
        "output.grid_points=25",
    ]);
    ok(&args, &out);

    let grid = PredictionTable::from_csv(&fs::read_to_string(out.join("predictions.csv")).unwrap())
        .unwrap();
    assert_eq!(grid.x.len(), 25);
    assert!(grid
        .std_noisy
        .iter()
        .zip(&grid.std_noiseless)
        .all(|(n, l)| n >= l));
    let held = PredictionTable::from_csv(
        &fs::read_to_string(out.join("holdout_predictions.csv")).unwrap(),
    )
    .unwrap();
    assert_eq!(held.observed.as_ref().map(Vec::len), Some(6));

    let histogram = json(&out.join("histogram.json"));
    let mass: f64 = histogram["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["mass"].as_f64().unwrap())
        .sum();
    assert!((mass - 1.0).abs() < 1e-12);
    let metrics = json(&out.join("metrics.json"));
    assert_eq!(metrics["metrics"]["holdout_points"], 6);
    assert!(metrics["standardization"].is_object());
    assert!(metrics["metrics"]["blr"]["rmse"]
        .as_f64()
        .unwrap()
        .is_finite());
    assert!(out.join("blr_predictions.csv").exists());
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "[schedule]\nsweeps = 3\nhyper_steps = 2\nstructure_steps = 2\n[synth]\nn = 15\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(
        &[
            "fit",
            "--config",
            config.to_str().unwrap(),
            "--set",
            "schedule.sweeps=5",
        ],
        &out,
    );
    let samples = json(&out.join("samples.json"));
    let chain = &samples["chains"][0];
    assert_eq!(chain["samples"].as_array().unwrap().len(), 5);
}

#[test]
fn clustering_and_comparison_write_their_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cluster");
    let mut args = vec!["cluster", "--set", "synth.n=20"];
    args.extend(QUICK);
    ok(&args, &out);
    let partitions = json(&out.join("partitions.json"));
    assert!(partitions.to_string().contains('{'));

    let out = dir.path().join("compare");
    let mut args = vec![
        "compare-inference",
        "--set",
        "synth.kind=periodic",
        "--set",
        "synth.n=30",
    ];
    args.extend(QUICK);
    args.extend([
        "--set",
        "holdout.fraction=0.2",
        "--set",
        "compare.start=given",
    ]);
    ok(&args, &out);
    let summary = json(&out.join("compare.json"));
    let methods: Vec<&str> = summary["methods"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["mh", "gradient"]);
    assert!(
        out.join("predictions_mh.csv").exists() && out.join("predictions_gradient.csv").exists()
    );
}

#[test]
fn failures_map_to_exit_codes_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = |args: &[&str]| gpstruct(args, &out).status.code();
    assert_eq!(code(&["fit", "--set", "schedule.sweeps=0"]), Some(2));
    assert_eq!(code(&["fit", "--set", "prior.p_branch=2.0"]), Some(2));
    assert_eq!(code(&["fit", "--set", "nonsense"]), Some(2));
    assert_eq!(code(&["fit", "--data", "/nonexistent/series.csv"]), Some(3));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,y\n1,2\n3,oops\n").unwrap();
    assert_eq!(code(&["fit", "--data", bad.to_str().unwrap()]), Some(3));
    assert!(!out.exists());
}
