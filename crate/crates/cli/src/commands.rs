use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use gtr_core::analysis::{self, CorrelationMatrix, TheoremParams};
use gtr_core::data::{ingest_csv, read_csv, RawTable, Split, TimeSeriesDataset};
use gtr_core::synth::{self, SynthParams};
use gtr_core::train::{
    build_model, evaluate, load_checkpoint, save_checkpoint, train_with, CheckpointHeader, EpochRecord, Metrics,
    RunConfig, TrainHooks,
};

use crate::fail::Fail;
use crate::RunArgs;

pub const MANIFEST: &str = "manifest.txt";
pub const METRICS: &str = "metrics.jsonl";
pub const SUMMARY: &str = "summary.json";
const DIGEST_KEY: &str = "# dataset_sha256 = ";

fn load_config(run: &RunArgs) -> Result<RunConfig, Fail> {
    let mut cfg = match &run.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Fail::usage(anyhow!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_text(&text).map_err(|e| Fail::usage(anyhow!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for o in &run.overrides {
        cfg.apply_override(o)
            .map_err(|e| Fail::usage(anyhow!("--override {o}: {e}")))?;
    }
    if let Some(&first) = run.seeds.first() {
        cfg.seed = first;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(run: &RunArgs, cfg: &RunConfig) -> Vec<u64> {
    if run.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        run.seeds.clone()
    }
}

fn data_path(cfg: &RunConfig) -> Result<&Path, Fail> {
    cfg.data_path
        .as_deref()
        .ok_or_else(|| Fail::usage(anyhow!("no data_path in the configuration")))
}

fn sha256_file(path: &Path) -> Result<String, Fail> {
    let bytes = fs::read(path).map_err(|e| Fail::data(anyhow!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, text: &str) -> Result<(), Fail> {
    fs::write(path, text).map_err(|e| Fail::data(anyhow!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Fail> {
    fs::create_dir_all(path).map_err(|e| Fail::data(anyhow!("cannot create {}: {e}", path.display())))
}

pub fn manifest_text(cfg: &RunConfig, digest: &str, seeds: &[u64]) -> String {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!(
        "# gtr run manifest\n{DIGEST_KEY}{digest}\n# seeds = {}\n{}",
        seeds.join(","),
        cfg.to_text()
    )
}

fn manifest_digest(text: &str) -> Option<&str> {
    text.lines().find_map(|l| l.strip_prefix(DIGEST_KEY)).map(str::trim)
}

fn record(cfg: &RunConfig, seed: u64, epoch: Option<usize>, split: &str, m: Metrics) -> Value {
    json!({
        "dataset": cfg.dataset,
        "T": cfg.lookback,
        "S": cfg.horizon,
        "seed": seed,
        "epoch": epoch,
        "split": split,
        "mse": m.mse,
        "mae": m.mae,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub struct Summary {
    pub mse: (f64, f64),
    pub mae: (f64, f64),
    pub per_seed: Vec<(u64, Metrics)>,
}

impl Summary {
    fn to_json(&self, cfg: &RunConfig) -> Value {
        json!({
            "dataset": cfg.dataset,
            "T": cfg.lookback,
            "S": cfg.horizon,
            "split": "test",
            "seeds": self.per_seed.iter().map(|(s, _)| s).collect::<Vec<_>>(),
            "mse_mean": self.mse.0,
            "mse_std": self.mse.1,
            "mae_mean": self.mae.0,
            "mae_std": self.mae.1,
        })
    }
}

/// Trains one configuration for every seed into `dir`: manifest, metrics
/// lines, one checkpoint per seed and a summary.
fn execute(cfg: &RunConfig, seeds: &[u64], dir: &Path) -> Result<Summary, Fail> {
    let path = data_path(cfg)?;
    let digest = sha256_file(path)?;
    let ds = ingest_csv(path, &cfg.split_spec())?;
    let mut cfg = cfg.clone();
    cfg.model_config(ds.channels())?;
    cfg.channels = ds.channels();
    create_dir(dir)?;
    write_file(&dir.join(MANIFEST), &manifest_text(&cfg, &digest, seeds))?;
    let metrics_path = dir.join(METRICS);
    let mut metrics = fs::File::create(&metrics_path)
        .map_err(|e| Fail::data(anyhow!("cannot write {}: {e}", metrics_path.display())))?;

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = RunConfig { seed, ..cfg.clone() };
        let report = train_seed(&run_cfg, &ds, dir, &mut metrics).map_err(|f| f.context(format!("seed {seed}")))?;
        writeln!(metrics, "{}", record(&run_cfg, seed, report.0, "test", report.1))?;
        eprintln!(
            "seed {seed}: test mse {:.6} mae {:.6} (best epoch {:?})",
            report.1.mse, report.1.mae, report.0
        );
        per_seed.push((seed, report.1));
    }
    let mse: Vec<f64> = per_seed.iter().map(|(_, m)| m.mse).collect();
    let mae: Vec<f64> = per_seed.iter().map(|(_, m)| m.mae).collect();
    let summary = Summary {
        mse: mean_std(&mse),
        mae: mean_std(&mae),
        per_seed,
    };
    write_file(&dir.join(SUMMARY), &format!("{}\n", summary.to_json(&cfg)))?;
    Ok(summary)
}

fn train_seed(
    cfg: &RunConfig,
    ds: &TimeSeriesDataset,
    dir: &Path,
    metrics: &mut fs::File,
) -> Result<(Option<usize>, Metrics), Fail> {
    let mut model = build_model(cfg, ds.channels())?;
    let mut io_err: Option<std::io::Error> = None;
    let mut on_epoch = |r: &EpochRecord| {
        eprintln!(
            "seed {} epoch {}/{}: lr {} train {:.6} val mse {:.6} mae {:.6}",
            cfg.seed, r.epoch, cfg.epochs, r.lr, r.train_loss, r.val.mse, r.val.mae
        );
        if let Err(e) = writeln!(metrics, "{}", record(cfg, cfg.seed, Some(r.epoch), "val", r.val)) {
            io_err.get_or_insert(e);
        }
    };
    let hooks = TrainHooks {
        lr_schedule: None,
        on_epoch: Some(&mut on_epoch),
    };
    let report = train_with(&mut model, ds, cfg, hooks)?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let header = CheckpointHeader::of(&model, cfg.cycle_len, cfg.period, cfg.seed);
    save_checkpoint(checkpoint_path(dir, cfg.seed), &model, &header)?;
    Ok((report.best_epoch, report.test))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.ckpt"))
}

pub fn train(run: &RunArgs) -> Result<(), Fail> {
    let cfg = load_config(run)?;
    let summary = execute(&cfg, &seeds(run, &cfg), &run.out)?;
    println!("{}", summary.to_json(&cfg));
    Ok(())
}

pub fn eval(run: &RunArgs, checkpoint: &Path) -> Result<(), Fail> {
    let cfg = load_config(run)?;
    let path = data_path(&cfg)?;
    let digest = sha256_file(path)?;
    if let Some(manifest) = &run.config {
        let text = fs::read_to_string(manifest)?;
        if let Some(want) = manifest_digest(&text) {
            if want != digest {
                return Err(Fail::data(anyhow!(
                    "{} has sha256 {digest}, manifest recorded {want}",
                    path.display()
                )));
            }
        }
    }
    let (header, model) = load_checkpoint(checkpoint)?;
    if header.lookback != cfg.lookback || header.horizon != cfg.horizon {
        return Err(Fail::usage(anyhow!(
            "checkpoint is T={} S={}, config is T={} S={}",
            header.lookback,
            header.horizon,
            cfg.lookback,
            cfg.horizon
        )));
    }
    let ds = ingest_csv(path, &cfg.split_spec())?;
    if ds.channels() != header.channels {
        return Err(Fail::data(anyhow!(
            "checkpoint has {} channels, data has {}",
            header.channels,
            ds.channels()
        )));
    }
    let mut lines = String::new();
    for (name, split) in [("val", Split::Val), ("test", Split::Test)] {
        let m = evaluate(&model, &ds, split, cfg.batch_size)?;
        lines.push_str(&format!("{}\n", record(&cfg, header.seed, None, name, m)));
    }
    create_dir(&run.out)?;
    write_file(&run.out.join("eval.jsonl"), &lines)?;
    print!("{lines}");
    Ok(())
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.'))
}

/// `LABEL: key=value key=value ...`
pub fn parse_cell(cell: &str) -> Result<(String, Vec<String>), Fail> {
    let (label, rest) = cell.split_once(':').unwrap_or((cell, ""));
    let label = label.trim();
    if !valid_label(label) {
        return Err(Fail::usage(anyhow!(
            "cell label {label:?} must be non-empty and use only letters, digits, _ - + ."
        )));
    }
    Ok((label.to_string(), rest.split_whitespace().map(str::to_string).collect()))
}

/// `(MSE_base − MSE_cell) / MSE_cell`.
pub fn improvement(base_mse: f64, cell_mse: f64) -> f64 {
    (base_mse - cell_mse) / cell_mse
}

pub fn ablate(run: &RunArgs, cells: &[String], baseline: Option<&str>) -> Result<(), Fail> {
    if cells.is_empty() {
        return Err(Fail::usage(anyhow!("ablation grid is empty; pass at least one --cell")));
    }
    let base = load_config(run)?;
    let seeds = seeds(run, &base);
    let mut parsed = Vec::with_capacity(cells.len());
    let mut seen = HashSet::new();
    for c in cells {
        let (label, overrides) = parse_cell(c)?;
        if !seen.insert(label.clone()) {
            return Err(Fail::usage(anyhow!("duplicate cell label {label:?}")));
        }
        let mut cfg = base.clone();
        for o in &overrides {
            cfg.apply_override(o)
                .map_err(|e| Fail::usage(anyhow!("cell {label}: {o}: {e}")))?;
        }
        cfg.validate()
            .map_err(|e| Fail::usage(anyhow!("cell {label}: {e}")))?;
        parsed.push((label, overrides, cfg));
    }
    let baseline = baseline.unwrap_or(&parsed[0].0).to_string();
    if !seen.contains(&baseline) {
        return Err(Fail::usage(anyhow!("baseline {baseline:?} is not a cell label")));
    }

    let mut results: Vec<(String, Vec<String>, Result<Summary, Fail>)> = Vec::new();
    for (label, overrides, cfg) in parsed {
        eprintln!("cell {label}");
        let res = execute(&cfg, &seeds, &run.out.join(&label));
        if let Err(f) = &res {
            eprintln!("cell {label} failed: {:#}", f.error());
        }
        results.push((label, overrides, res));
    }
    let base_mse = results
        .iter()
        .find(|(l, _, _)| *l == baseline)
        .and_then(|(_, _, r)| r.as_ref().ok())
        .map(|s| s.mse.0);
    let partial = results.iter().any(|(_, _, r)| r.is_err());
    let rows: Vec<Value> = results
        .iter()
        .map(|(label, overrides, r)| match r {
            Ok(s) => json!({
                "label": label,
                "overrides": overrides,
                "mse_mean": s.mse.0,
                "mse_std": s.mse.1,
                "mae_mean": s.mae.0,
                "mae_std": s.mae.1,
                "improvement": base_mse.map(|b| improvement(b, s.mse.0)),
            }),
            Err(f) => json!({
                "label": label,
                "overrides": overrides,
                "error": format!("{:#}", f.error()),
            }),
        })
        .collect();
    let table = json!({
        "dataset": base.dataset,
        "T": base.lookback,
        "S": base.horizon,
        "seeds": seeds,
        "baseline": baseline,
        "partial": partial,
        "cells": rows,
    });
    create_dir(&run.out)?;
    write_file(&run.out.join("ablation.json"), &format!("{table:#}\n"))?;
    println!("{table}");
    match results.into_iter().find_map(|(label, _, r)| r.err().map(|f| (label, f))) {
        Some((label, f)) => Err(f.context(format!("cell {label} failed; table is partial"))),
        None => Ok(()),
    }
}

fn resolve_channel(table: &RawTable, channel: &str) -> Result<usize, Fail> {
    if let Some(i) = table.names.iter().position(|n| n == channel) {
        return Ok(i);
    }
    match channel.parse::<usize>() {
        Ok(i) if i < table.names.len() => Ok(i),
        _ => Err(Fail::usage(anyhow!(
            "no channel {channel:?}; columns are {:?}",
            table.names
        ))),
    }
}

pub fn estimate_cycle(data: &Path, channel: &str, max_lag: usize, min_lag: usize, acf_out: Option<&Path>) -> Result<(), Fail> {
    let table = read_csv(data)?;
    let c = resolve_channel(&table, channel)?;
    let series = table.column(c);
    let l = analysis::estimate_cycle_length(&series, max_lag, min_lag)?;
    if let Some(out) = acf_out {
        let r = analysis::acf(&series, max_lag)?;
        let mut text = String::from("lag,r\n");
        for (k, v) in r.iter().enumerate() {
            text.push_str(&format!("{k},{v}\n"));
        }
        write_file(out, &text)?;
    }
    println!("{l}");
    Ok(())
}

pub fn correlate(data: &Path, segment_len: Option<usize>, channel: &str, out: Option<&Path>) -> Result<(), Fail> {
    let table = read_csv(data)?;
    let m = match segment_len {
        Some(len) => {
            let c = resolve_channel(&table, channel)?;
            analysis::segment_correlation(&table.column(c), len)?
        }
        None => {
            let cols: Vec<Vec<f64>> = (0..table.names.len()).map(|c| table.column(c)).collect();
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            CorrelationMatrix::from_rows(&refs)?
        }
    };
    match out {
        Some(path) => write_file(path, &m.to_csv()),
        None => {
            print!("{}", m.to_csv());
            Ok(())
        }
    }
}

pub fn verify_theorem(samples: usize, seed: u64, cell: Option<TheoremParams>, out: Option<&Path>) -> Result<(), Fail> {
    let grid = match cell {
        Some(p) => vec![p],
        None => analysis::default_theorem_grid(samples, seed),
    };
    let mut lines = String::new();
    let mut holds = 0;
    let mut claimed = 0;
    for p in &grid {
        let r = analysis::verify_theorem1(p)?;
        if r.hypothesis {
            claimed += 1;
            holds += usize::from(r.inequality_holds);
        }
        lines.push_str(&format!("{}\n", serde_json::to_string(&r).map_err(Fail::data)?));
    }
    eprintln!("inequality holds in {holds} of {claimed} cells with sigma_eps2 < sigma_eta2");
    match out {
        Some(path) => write_file(path, &lines),
        None => {
            print!("{lines}");
            Ok(())
        }
    }
}

pub fn synth(params: &SynthParams, out: &Path) -> Result<(), Fail> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    synth::write_csv(out, params)?;
    println!("{}", out.display());
    Ok(())
}
