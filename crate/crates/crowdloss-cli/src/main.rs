//! Command-line harness: dataset generation, noise injection, training,
//! psi sweeps, checkpoint evaluation, and plot-ready exports.
//!
//! Every run reads one flat `key = value` config file, applies `--set`
//! overrides, and writes its artifacts into `--out`. Existing artifact
//! files are never overwritten unless `--force` is passed. All JSON
//! artifacts carry the canonical config hash and the run seed; CSV
//! artifacts carry them in a leading `#` comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crowdloss::config::{self, ConfigError, ConfigMap};
use crowdloss::data::{self, DataError};
use crowdloss::loss::CorrectionWeights;
use crowdloss::metrics::{evaluate_model, EvalArtifacts, MetricsError};
use crowdloss::mixture::EpochFit;
use crowdloss::model::{load_checkpoint, save_checkpoint, ModelError};
use crowdloss::synth::{generate_synthetic, inject_noise_with_mode, SynthError};
use crowdloss::train::{run_psi_sweep, train, TrainError};

#[derive(Parser)]
#[command(name = "crowdloss", version, about = "Multi-annotator training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set psi=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing artifact files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-faction dataset.
    Gen(Common),
    /// Inject label noise into an existing dataset.
    Noise(Common),
    /// Train one model and write history, checkpoint, and final metrics.
    Train(Common),
    /// Train across `psi_values` x `seeds` and write the aggregate report.
    Sweep(Common),
    /// Re-evaluate a saved checkpoint; reproduces the final training metrics.
    Eval(Common),
    /// Export plot-ready mixture, split, and histogram artifacts.
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Noise(_) => "noise",
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen(c)
            | Command::Noise(c)
            | Command::Train(c)
            | Command::Sweep(c)
            | Command::Eval(c)
            | Command::Report(c) => c,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable failure contract: one JSON object on stderr,
            // nonzero exit.
            let payload = json!({ "error": format!("{err:#}"), "kind": classify(&err) });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn classify(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<SynthError>() {
            return "synth";
        }
        if cause.is::<TrainError>() {
            return "train";
        }
        if cause.is::<MetricsError>() {
            return "metrics";
        }
        if cause.is::<ModelError>() {
            return "model";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn run(command: &Command) -> Result<()> {
    let common = command.common();
    let map = load_config(common)?;
    let out = OutDir::prepare(common)?;
    match command {
        Command::Gen(_) => cmd_gen(&map, &out),
        Command::Noise(_) => cmd_noise(&map, &out),
        Command::Train(_) => cmd_train(&map, &out),
        Command::Sweep(_) => cmd_sweep(&map, &out),
        Command::Eval(_) => cmd_eval(&map, &out),
        Command::Report(_) => cmd_report(&map, &out),
    }?;
    write_provenance(command.name(), &map, &out)
}

fn load_config(common: &Common) -> Result<ConfigMap> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let mut map = ConfigMap::parse_str(&text)?;
    for assignment in &common.set {
        map.apply_override(assignment)?;
    }
    Ok(map)
}

/// Output directory plus the overwrite policy for artifact files.
struct OutDir {
    dir: PathBuf,
    force: bool,
}

impl OutDir {
    fn prepare(common: &Common) -> Result<Self> {
        fs::create_dir_all(&common.out)
            .with_context(|| format!("creating output dir {}", common.out.display()))?;
        Ok(Self { dir: common.out.clone(), force: common.force })
    }

    /// Reserve `name`: errors if the file exists and `--force` was not given.
    fn claim(&self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            bail!("{} already exists; pass --force to overwrite", path.display());
        }
        Ok(path)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.claim(name)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

/// Leading comment line stamped onto CSV artifacts.
fn csv_stamp(map: &ConfigMap, seed: u64) -> String {
    format!("# config_hash={} seed={}\n", map.hash_hex(), seed)
}

fn stamped_csv(map: &ConfigMap, seed: u64, body: &str) -> String {
    let mut out = csv_stamp(map, seed);
    out.push_str(body);
    out
}

fn write_provenance(command: &str, map: &ConfigMap, out: &OutDir) -> Result<()> {
    let config: serde_json::Map<String, Value> =
        map.iter().map(|(k, v)| (k.to_string(), Value::String(v.to_string()))).collect();
    // Provenance always overwrites: it describes the run that just happened.
    let path = out.dir.join("provenance.json");
    let value = json!({
        "command": command,
        "config_hash": map.hash_hex(),
        "config": config,
    });
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn require_path(map: &ConfigMap, key: &str) -> Result<PathBuf> {
    let raw = map
        .raw(key)
        .ok_or_else(|| ConfigError::MissingKey { key: key.to_string() })?;
    Ok(PathBuf::from(raw))
}

fn load_data(map: &ConfigMap) -> Result<crowdloss::Dataset> {
    let path = require_path(map, "data")?;
    data::load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))
}

// ============================================================================
// gen
// ============================================================================

fn cmd_gen(map: &ConfigMap, out: &OutDir) -> Result<()> {
    let cfg = config::synth_config(map)?;
    let dataset = generate_synthetic(&cfg)?;
    out.write("data.jsonl", &data::to_jsonl_string(&dataset))?;
    out.write_json(
        "gen.json",
        &json!({
            "config_hash": map.hash_hex(),
            "seed": cfg.seed,
            "num_samples": dataset.num_samples(),
            "num_annotators": dataset.num_annotators(),
            "feature_dim": dataset.feature_dim(),
        }),
    )
}

// ============================================================================
// noise
// ============================================================================

fn cmd_noise(map: &ConfigMap, out: &OutDir) -> Result<()> {
    let dataset = load_data(map)?;
    let params = config::noise_params(map)?;
    let (noisy, record) =
        inject_noise_with_mode(&dataset, params.rate, params.seed, params.mode)?;
    out.write("data.jsonl", &data::to_jsonl_string(&noisy))?;
    out.write_json(
        "noise.json",
        &json!({
            "config_hash": map.hash_hex(),
            "seed": params.seed,
            "record": serde_json::to_value(&record)?,
            "flipped_samples": record.flipped_samples(),
        }),
    )
}

// ============================================================================
// train
// ============================================================================

fn cmd_train(map: &ConfigMap, out: &OutDir) -> Result<()> {
    let cfg = config::train_config(map)?;
    let dataset = load_data(map)?;
    let output = train(&cfg, &dataset)?;

    out.write("history.csv", &stamped_csv(map, cfg.seed, &output.history.to_csv_string()))?;
    let checkpoint = out.claim("model.json")?;
    save_checkpoint(&output.params, &checkpoint)?;
    write_eval_artifacts(map, cfg.seed, out, &output.final_eval, true)
}

/// Metrics always ship; the mixture/split/histogram exports are optional so
/// `eval` can stay bit-comparable across configs that differ only in paths.
fn write_eval_artifacts(
    map: &ConfigMap,
    seed: u64,
    out: &OutDir,
    eval: &EvalArtifacts,
    full: bool,
) -> Result<()> {
    out.write_json(
        "metrics.json",
        &json!({
            "config_hash": map.hash_hex(),
            "seed": seed,
            "report": serde_json::to_value(&eval.report)?,
        }),
    )?;
    out.write("metrics.csv", &stamped_csv(map, seed, &eval.report.to_csv_string()))?;
    if full {
        write_report_artifacts(map, seed, out, eval)?;
    }
    Ok(())
}

fn write_report_artifacts(
    map: &ConfigMap,
    seed: u64,
    out: &OutDir,
    eval: &EvalArtifacts,
) -> Result<()> {
    out.write_json(
        "split.json",
        &json!({
            "config_hash": map.hash_hex(),
            "seed": seed,
            "split": serde_json::to_value(&eval.split)?,
        }),
    )?;
    out.write_json("mixture.json", &mixture_value(map, seed, &eval.fit)?)?;
    out.write("histogram.csv", &stamped_csv(map, seed, &histogram_csv(&eval.histogram)))?;
    Ok(())
}

/// `EpochFit` flattened for JSON: correction weights become explicit
/// `[sample, annotator, weight]` triples (per-cell), `[weight]` per sample
/// (global), or a single uniform value.
fn mixture_value(map: &ConfigMap, seed: u64, fit: &EpochFit) -> Result<Value> {
    let weights = match &fit.weights {
        CorrectionWeights::Uniform(w) => json!({ "kind": "uniform", "value": w }),
        CorrectionWeights::PerSample(ws) => json!({ "kind": "per_sample", "values": ws }),
        CorrectionWeights::PerCell(cells) => {
            let triples: Vec<Value> =
                cells.iter().map(|(&(s, a), &w)| json!([s, a, w])).collect();
            json!({ "kind": "per_cell", "cells": triples })
        }
    };
    Ok(json!({
        "config_hash": map.hash_hex(),
        "seed": seed,
        "epoch": fit.epoch,
        "scope": serde_json::to_value(fit.scope)?,
        "family": serde_json::to_value(fit.family)?,
        "weights": weights,
        "fits": serde_json::to_value(&fit.fits)?,
    }))
}

fn histogram_csv(rows: &[crowdloss::mixture::HistogramRow]) -> String {
    let mut out = String::from("annotator,bin,lo,hi,majority_count,minority_count\n");
    for r in rows {
        match r.annotator {
            Some(a) => {
                let _ = write!(out, "{a}");
            }
            None => out.push_str("all"),
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            r.bin, r.lo, r.hi, r.majority_count, r.minority_count
        );
    }
    out
}

// ============================================================================
// sweep
// ============================================================================

fn sweep_threads() -> Result<Option<usize>> {
    match std::env::var("CROWDLOSS_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .map_err(|_| ConfigError::Invalid(format!(
                    "CROWDLOSS_THREADS must be a positive integer, got {raw:?}"
                )))?;
            Ok(if n == 0 { None } else { Some(n) })
        }
        Err(_) => Ok(None),
    }
}

fn cmd_sweep(map: &ConfigMap, out: &OutDir) -> Result<()> {
    let cfg = config::train_config(map)?;
    let psi_values = config::psi_values(map)?;
    let dataset = load_data(map)?;
    let report = run_psi_sweep(&cfg, &dataset, &psi_values, sweep_threads()?)?;

    out.write("sweep.csv", &stamped_csv(map, cfg.seed, &report.to_csv_string()))?;
    out.write("sweep_runs.csv", &stamped_csv(map, cfg.seed, &report.runs_to_csv_string()))?;
    out.write_json(
        "sweep.json",
        &json!({
            "config_hash": map.hash_hex(),
            "seed": cfg.seed,
            "report": serde_json::to_value(&report)?,
        }),
    )
}

// ============================================================================
// eval / report
// ============================================================================

fn load_eval(map: &ConfigMap) -> Result<EvalArtifacts> {
    let cfg = config::train_config(map)?;
    let checkpoint = require_path(map, "checkpoint")?;
    let params = load_checkpoint(&checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let dataset = load_data(map)?;
    // Same options the final training epoch used, so the metrics row
    // reproduces bit-exactly.
    let options = cfg.eval_options(cfg.epochs);
    Ok(evaluate_model(&params, &dataset, &options)?)
}

fn cmd_eval(map: &ConfigMap, out: &OutDir) -> Result<()> {
    let cfg = config::train_config(map)?;
    let eval = load_eval(map)?;
    write_eval_artifacts(map, cfg.seed, out, &eval, false)
}

fn cmd_report(map: &ConfigMap, out: &OutDir) -> Result<()> {
    let cfg = config::train_config(map)?;
    let eval = load_eval(map)?;
    write_report_artifacts(map, cfg.seed, out, &eval)
}
