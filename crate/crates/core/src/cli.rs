//! Command-line front end. Every command renders all of its output files
//! in memory first and writes them only once the whole run has succeeded.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::baseline::{blr_baseline, BaselineError};
use crate::config::{ConfigError, RunConfig, Task};
use crate::gp::{predict, sample_predictive, Dataset, GpError};
use crate::inference::{chain_rng, ChainRun, InferenceError};
use crate::io::{fmt17, ingest_csv, json_bytes, IoError, OutputSet, PredictionTable};
use crate::kernel::KernelAst;
use crate::pipeline::{
    cluster_series, compare_inference, fit_structure, kept_samples, partition_key, FitReport,
    PipelineError, Prepared, AUX_STREAM,
};
use crate::summary::{thin, Errors};
use crate::synth::{cluster_demo, grid, synth_data};

#[derive(Debug, Parser)]
#[command(
    name = "gpstruct",
    version,
    about = "Bayesian kernel-structure discovery for time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input CSV (`x,y`, or `series_id,x,y` for `cluster`).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `schedule.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `schedule.chains`.
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    /// Overrides one config field, e.g. `--set schedule.sweeps=50`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand, Clone, Copy)]
pub enum Command {
    /// Infer the structure posterior; write histogram, samples, metrics and predictions.
    Fit,
    /// Infer, then write predictions on a grid and at held-out inputs.
    Predict,
    /// Cluster several series by shared structure.
    Cluster,
    /// Compare MH and gradient hyperparameter inference on a fixed structure.
    CompareInference,
    /// Write a synthetic dataset.
    SynthData,
}

impl Command {
    fn task(self) -> Task {
        match self {
            Command::Fit => Task::Fit,
            Command::Predict => Task::Predict,
            Command::Cluster => Task::Cluster,
            Command::CompareInference => Task::CompareInference,
            Command::SynthData => Task::SynthData,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Holdout(_) | IoError::NoSamples => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::Shape { .. } | GpError::NonFiniteData => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        let kind = |inner: &InferenceError| -> fn(String) -> CliError {
            let mut inner = inner;
            while let InferenceError::Step { source, .. } = inner {
                inner = source;
            }
            match inner {
                InferenceError::Config(_)
                | InferenceError::Prior(_)
                | InferenceError::Kernel(_) => CliError::Config,
                InferenceError::Gp(GpError::Shape { .. } | GpError::NonFiniteData) => {
                    CliError::Data
                }
                _ => CliError::Numeric,
            }
        };
        kind(&e)(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Inference(e) => e.into(),
            PipelineError::Gp(e) => e.into(),
            PipelineError::Io(e) => e.into(),
            PipelineError::Baseline(e) => e.into(),
        }
    }
}

/// Parses arguments, runs the command and returns the written files.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("schedule.seed={seed}"));
    }
    if let Some(chains) = cli.common.chains {
        overrides.push(format!("schedule.chains={chains}"));
    }
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    cfg.task = cli.command.task();
    let outputs = match cli.command {
        Command::Fit | Command::Predict => fit_or_predict(&cfg, cli.common.data.as_deref())?,
        Command::Cluster => cluster(&cfg, cli.common.data.as_deref())?,
        Command::CompareInference => compare(&cfg, cli.common.data.as_deref())?,
        Command::SynthData => synth(&cfg)?,
    };
    Ok(outputs.write(&cli.common.out)?)
}

/// Loaded data and whether it should be standardized.
fn load_single(cfg: &RunConfig, data: Option<&Path>) -> Result<(Dataset, bool), CliError> {
    match data {
        Some(path) => Ok((
            ingest_csv(path)?.into_single()?,
            cfg.standardize.unwrap_or(true),
        )),
        None => {
            let mut rng = chain_rng(cfg.schedule.seed, AUX_STREAM);
            let d = synth_data(cfg.synth.kind, cfg.synth.n, &mut rng)?;
            Ok((d, cfg.standardize.unwrap_or(false)))
        }
    }
}

fn split(cfg: &RunConfig, d: &Dataset) -> Result<(Dataset, Dataset), CliError> {
    let mut rng = chain_rng(cfg.schedule.seed, AUX_STREAM + 1);
    Ok(cfg.holdout.split(d, &mut rng)?)
}

/// Evenly spaced probe inputs spanning `d`.
fn probe_grid(d: &Dataset, points: usize) -> Vec<f64> {
    let lo = d.xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    grid(points)
        .into_iter()
        .map(|g| lo + (hi - lo) * g / 10.0)
        .collect()
}

fn samples_json(runs: &[ChainRun]) -> Value {
    let chains: Vec<Value> = runs
        .iter()
        .map(|r| {
            let samples: Vec<Value> = r
                .samples
                .iter()
                .map(|s| {
                    json!({
                        "sweep": s.sweep,
                        "label": s.label,
                        "kernel": s.ast.to_json(),
                        "log_likelihood": s.log_likelihood,
                        "log_prior": s.log_prior,
                    })
                })
                .collect();
            json!({"chain": r.chain, "stats": r.stats, "samples": samples})
        })
        .collect();
    json!({ "chains": chains })
}

/// Predictions of the model average on `probe`, with `draws` function
/// samples from the mixture as extra columns.
fn prediction_table(
    cfg: &RunConfig,
    report: &FitReport,
    probe: &[f64],
    draws: usize,
) -> Result<PredictionTable, CliError> {
    let kept = report.kept(cfg.schedule.burn_in);
    let asts: Vec<&KernelAst> = thin(&kept, cfg.output.max_averaged)
        .into_iter()
        .map(|s| &s.ast)
        .collect();
    let post = report.prepared.average(&asts, probe, cfg.noise_var)?;
    let mut table = PredictionTable::from_posterior(&post);
    let mut rng = chain_rng(cfg.schedule.seed, AUX_STREAM + 2);
    let model_probe: Vec<f64> = match &report.prepared.transform {
        Some(t) => probe.iter().map(|&x| t.x(x)).collect(),
        None => probe.to_vec(),
    };
    for _ in 0..draws {
        let ast = asts[rng.random_range(0..asts.len())];
        let p = predict(ast, &report.prepared.train, &model_probe, cfg.noise_var)?;
        let p = match &report.prepared.transform {
            Some(t) => t.invert(&p),
            None => p,
        };
        let f = sample_predictive(&p, &mut rng, 1)?.remove(0);
        table.samples.push(f.iter().copied().collect());
    }
    Ok(table)
}

fn fit_or_predict(cfg: &RunConfig, data: Option<&Path>) -> Result<OutputSet, CliError> {
    let (all, standardize) = load_single(cfg, data)?;
    let (train, test) = split(cfg, &all)?;
    let model = cfg.model();
    let report = fit_structure(
        &train,
        &test,
        standardize,
        &model,
        &cfg.schedule,
        cfg.output.max_averaged,
    )?;
    let mut out = OutputSet::default();
    let probe = probe_grid(&all, cfg.output.grid_points);
    let draws = cfg.output.predictive_samples;
    out.add("histogram.json", json_bytes(&report.histogram));
    out.add("samples.json", json_bytes(&samples_json(&report.runs)));
    let metrics = json!({
        "task": cfg.task,
        "map_label": report.map_label,
        "standardization": report.prepared.transform,
        "metrics": report.metrics,
    });
    out.add("metrics.json", json_bytes(&metrics));
    out.add(
        "predictions.csv",
        prediction_table(cfg, &report, &probe, draws)?
            .to_csv()
            .into_bytes(),
    );
    if cfg.task == Task::Predict && !test.is_empty() {
        let mut table = prediction_table(cfg, &report, &test.xs, draws)?;
        table.observed = Some(test.ys.clone());
        out.add("holdout_predictions.csv", table.to_csv().into_bytes());
        let blr = blr_baseline(&train, &test.xs)?;
        out.add(
            "blr_predictions.csv",
            PredictionTable::from_posterior(&blr).to_csv().into_bytes(),
        );
    }
    Ok(out)
}

fn cluster(cfg: &RunConfig, data: Option<&Path>) -> Result<OutputSet, CliError> {
    let (series, standardize) = match data {
        Some(path) => (
            ingest_csv(path)?.into_series(),
            cfg.standardize.unwrap_or(true),
        ),
        None => {
            let mut rng = chain_rng(cfg.schedule.seed, AUX_STREAM);
            let series = cluster_demo(cfg.synth.n, &mut rng)?
                .into_iter()
                .enumerate()
                .map(|(i, d)| ((i + 1).to_string(), d))
                .collect();
            (series, cfg.standardize.unwrap_or(false))
        }
    };
    let report = cluster_series(
        &series,
        standardize,
        &cfg.model(),
        &cfg.schedule,
        &cfg.cluster,
    )?;
    let chains: Vec<Value> = report
        .runs
        .iter()
        .map(|r| {
            let samples: Vec<Value> = r
                .samples
                .iter()
                .map(|s| {
                    let named: Vec<Vec<&str>> = s
                        .partition
                        .iter()
                        .map(|p| p.iter().map(|&i| report.ids[i].as_str()).collect())
                        .collect();
                    json!({
                        "sweep": s.sweep,
                        "partition": named,
                        "key": partition_key(&s.partition, &report.ids),
                        "labels": s.labels,
                        "log_joint": s.log_joint,
                    })
                })
                .collect();
            json!({"chain": r.chain, "samples": samples})
        })
        .collect();
    let mut out = OutputSet::default();
    out.add(
        "partitions.json",
        json_bytes(&json!({
            "series": report.ids,
            "modal_partition": report.partitions.mode(),
            "histogram": report.partitions,
            "chains": chains,
        })),
    );
    Ok(out)
}

fn compare(cfg: &RunConfig, data: Option<&Path>) -> Result<OutputSet, CliError> {
    let (all, standardize) = load_single(cfg, data)?;
    let (train, test) = split(cfg, &all)?;
    let structure = KernelAst::from_json_str(&cfg.compare.structure)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let methods = compare_inference(
        &train,
        &test,
        standardize,
        &cfg.model(),
        &cfg.schedule,
        &structure,
        cfg.compare.start,
        cfg.output.max_averaged,
    )?;
    let prepared = Prepared::new(&train, standardize)?;
    let probe = probe_grid(&all, cfg.output.grid_points);
    let mut out = OutputSet::default();
    let mut summary = Vec::new();
    for m in &methods {
        let name = match m.mode {
            crate::inference::HyperMode::Mh => "mh",
            crate::inference::HyperMode::Gradient => "gradient",
            crate::inference::HyperMode::Mixed => "mixed",
        };
        let kept = kept_samples(&m.runs, cfg.schedule.burn_in);
        let asts: Vec<&KernelAst> = thin(&kept, cfg.output.max_averaged)
            .into_iter()
            .map(|s| &s.ast)
            .collect();
        let post = prepared.average(&asts, &probe, cfg.noise_var)?;
        out.add(
            &format!("predictions_{name}.csv"),
            PredictionTable::from_posterior(&post).to_csv().into_bytes(),
        );
        summary.push(json!({
            "method": name,
            "errors": m.errors,
            "hypers": m.hypers(cfg.schedule.burn_in),
            "stats": m.runs.iter().map(|r| r.stats).collect::<Vec<_>>(),
        }));
    }
    let blr = (!test.is_empty())
        .then(|| blr_baseline(&train, &test.xs).map(|p| Errors::of(&p, &test)))
        .transpose()?;
    out.add(
        "compare.json",
        json_bytes(&json!({
            "structure": structure.to_json(),
            "start": cfg.compare.start,
            "holdout_points": test.len(),
            "standardization": prepared.transform,
            "blr": blr,
            "methods": summary,
        })),
    );
    Ok(out)
}

fn synth(cfg: &RunConfig) -> Result<OutputSet, CliError> {
    let mut rng = chain_rng(cfg.schedule.seed, AUX_STREAM);
    let d = synth_data(cfg.synth.kind, cfg.synth.n, &mut rng)?;
    let mut csv = String::from("x,y\n");
    for (x, y) in d.xs.iter().zip(&d.ys) {
        csv.push_str(&format!("{},{}\n", fmt17(*x), fmt17(*y)));
    }
    let mut out = OutputSet::default();
    out.add(&format!("{}.csv", cfg.synth.kind), csv.into_bytes());
    Ok(out)
}
