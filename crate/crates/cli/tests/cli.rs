//! End-to-end runs of the `gtr` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    let text = format!(
        "dataset = tiny\ndata_path = {}\nsplit = 0.7,0.15\nlookback = 24\nhorizon = 12\n\
         cycle_len = 48\nperiod = 12\nhidden = 8\nbatch_size = 32\nepochs = 2\nseed = 3\n",
        data.display()
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

fn tiny_data(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("tiny.csv");
    let o = gtr(&[
        "synth", "--length", "600", "--channels", "2", "--cycle-len", "48", "--period", "12", "--out",
        p(&data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

#[test]
fn missing_csv_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let cfg = tiny_config(dir.path(), &missing);
    let o = gtr(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let o = gtr(&["train", "--config", p(&cfg), "--override", "colour=red"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn train_records_overrides_and_eval_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let out = dir.path().join("run");
    let o = gtr(&["train", "--config", p(&cfg), "--override", "seed=2026", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l.trim() == "seed = 2026"), "{manifest}");
    assert!(manifest.contains("dataset_sha256"));

    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().filter(|r| r["split"] == "val").count(), 2);
    let test = records.iter().find(|r| r["split"] == "test").unwrap();
    assert_eq!(test["seed"], 2026);

    let ckpt = out.join("seed-2026.ckpt");
    let eval_out = dir.path().join("eval");
    let o = gtr(&[
        "eval",
        "--config",
        p(&out.join("manifest.txt")),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&eval_out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let eval_test = lines.iter().find(|r| r["split"] == "test").unwrap();
    assert_eq!(eval_test["mse"], test["mse"]);
    assert_eq!(eval_test["mae"], test["mae"]);
}

#[test]
fn eval_rejects_changed_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let out = dir.path().join("run");
    let o = gtr(&["train", "--config", p(&cfg), "--override", "epochs=1", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("600,1,2\n");
    fs::write(&data, text).unwrap();
    let o = gtr(&[
        "eval",
        "--config",
        p(&out.join("manifest.txt")),
        "--checkpoint",
        p(&out.join("seed-3.ckpt")),
        "--out",
        p(&dir.path().join("eval")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sha256"));
}

#[test]
fn ablate_validates_grid_and_reports_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let out = dir.path().join("abl");

    let o = gtr(&["ablate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let o = gtr(&[
        "ablate", "--config", p(&cfg), "--out", p(&out), "--cell", "a: variant=none", "--cell", "a: epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));

    let o = gtr(&[
        "ablate",
        "--config",
        p(&cfg),
        "--override",
        "epochs=1",
        "--out",
        p(&out),
        "--cell",
        "mlp: variant=none",
        "--cell",
        "gtr: variant=conv2d",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table["partial"], false);
    assert!(out.join("mlp/summary.json").is_file() && out.join("gtr/summary.json").is_file());
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let o = gtr(&["synth", "--length", "500", "--seed", "4", "--out", p(path)]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 501);

    let o = gtr(&["synth", "--kind", "square", "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn estimate_cycle_finds_daily_and_weekly_periods() {
    let dir = tempfile::tempdir().unwrap();
    let sine = dir.path().join("sine.csv");
    let o = gtr(&[
        "synth", "--kind", "sine", "--length", "2000", "--channels", "1", "--noise", "0.3", "--out", p(&sine),
    ]);
    assert!(o.status.success());
    let o = gtr(&["estimate-cycle", "--data", p(&sine), "--max-lag", "96"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "24");

    let weekly = dir.path().join("weekly.csv");
    assert!(gtr(&["synth", "--out", p(&weekly)]).status.success());
    let acf = dir.path().join("acf.csv");
    let o = gtr(&[
        "estimate-cycle",
        "--data",
        p(&weekly),
        "--max-lag",
        "200",
        "--min-lag",
        "25",
        "--acf-out",
        p(&acf),
    ]);
    assert_eq!(stdout(&o).trim(), "168");
    let r: Vec<f64> = fs::read_to_string(&acf)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(r[23] < r[24] && r[24] > r[25], "no daily peak in the weekly file");
    assert!(r[167] < r[168] && r[168] > r[169]);
}

#[test]
fn correlate_identical_channels_gives_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("same.csv");
    let mut text = String::from("date,a,b\n");
    for t in 0..50 {
        let v = (t as f64 * 0.3).sin();
        text.push_str(&format!("{t},{v},{v}\n"));
    }
    fs::write(&data, text).unwrap();
    let o = gtr(&["correlate", "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cells: Vec<f64> = stdout(&o)
        .lines()
        .filter(|l| !l.trim().is_empty() && l.chars().any(|c| c.is_ascii_digit()))
        .flat_map(|l| l.split(',').filter_map(|c| c.trim().parse::<f64>().ok()).collect::<Vec<_>>())
        .collect();
    assert_eq!(cells.len(), 4, "{}", stdout(&o));
    assert!(cells.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn verify_theorem_single_cell() {
    let o = gtr(&["verify-theorem", "--samples", "20000", "--rho", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(rep["inequality_holds"], true);
    assert!((rep["closed_form_ratio"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);

    let o = gtr(&["verify-theorem", "--samples", "10", "--rho", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
}
