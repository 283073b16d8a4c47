//! End-to-end runs: structure fitting with held-out evaluation, MH versus
//! gradient hyperparameter inference, and series clustering.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::baseline::{blr_baseline, BaselineError};
use crate::clustering::{run_cluster_schedule, ClusterConfig, ClusterRun};
use crate::gp::{Dataset, GpError, GpPosterior};
use crate::inference::{
    chain_rng, run_chain, run_schedule, ChainRun, HyperMode, InferenceError, Model, Sample,
    ScheduleConfig,
};
use crate::io::{IoError, Standardization};
use crate::kernel::KernelAst;
use crate::prior::sample_hyper;
use crate::summary::{model_average, thin, Errors, Histogram};

/// Stream offset for RNGs that are not chain RNGs (data generation, splits,
/// starting points), keeping them disjoint from every chain.
pub const AUX_STREAM: usize = 1 << 40;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// Training data in model units plus the map back to original units.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub transform: Option<Standardization>,
}

impl Prepared {
    pub fn new(train_raw: &Dataset, standardize: bool) -> Result<Self, IoError> {
        let transform = if standardize {
            Some(Standardization::fit(train_raw)?)
        } else {
            None
        };
        let train = transform.map_or_else(|| train_raw.clone(), |t| t.apply(train_raw));
        Ok(Prepared { train, transform })
    }

    /// Model average over `asts`, evaluated at original-unit `probe` and
    /// returned in original units.
    pub fn average(
        &self,
        asts: &[&KernelAst],
        probe: &[f64],
        noise_var: f64,
    ) -> Result<GpPosterior, GpError> {
        let at: Vec<f64> = match &self.transform {
            Some(t) => probe.iter().map(|&x| t.x(x)).collect(),
            None => probe.to_vec(),
        };
        let post = model_average(asts, &self.train, &at, noise_var)?;
        Ok(match &self.transform {
            Some(t) => {
                let mut back = t.invert(&post);
                back.at = probe.to_vec();
                back
            }
            None => post,
        })
    }
}

/// Kept samples of every chain, chain by chain.
pub fn kept_samples(runs: &[ChainRun], burn_in: f64) -> Vec<&Sample> {
    runs.iter().flat_map(|r| r.kept(burn_in)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodErrors {
    #[serde(flatten)]
    pub overall: Errors,
    pub per_chain: Vec<Errors>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitMetrics {
    pub holdout_points: usize,
    pub model_average: Option<MethodErrors>,
    pub map_structure: Option<Errors>,
    pub blr: Option<Errors>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub prepared: Prepared,
    pub runs: Vec<ChainRun>,
    pub histogram: Histogram,
    pub map_label: String,
    pub metrics: FitMetrics,
    /// Model average at the held-out inputs, original units.
    pub holdout_average: Option<GpPosterior>,
}

impl FitReport {
    pub fn kept(&self, burn_in: f64) -> Vec<&Sample> {
        kept_samples(&self.runs, burn_in)
    }
}

fn asts<'a>(samples: &[&'a Sample], max: usize) -> Vec<&'a KernelAst> {
    thin(samples, max).into_iter().map(|s| &s.ast).collect()
}

/// Runs the structure schedule on `train_raw` and scores held-out points
/// against the model average, the MAP structure and linear regression.
pub fn fit_structure(
    train_raw: &Dataset,
    test: &Dataset,
    standardize: bool,
    model: &Model,
    schedule: &ScheduleConfig,
    max_averaged: usize,
) -> Result<FitReport, PipelineError> {
    let prepared = Prepared::new(train_raw, standardize)?;
    let runs = run_schedule(&prepared.train, model, schedule)?;
    let kept = kept_samples(&runs, schedule.burn_in);
    if kept.is_empty() {
        return Err(IoError::NoSamples.into());
    }
    let histogram = Histogram::from_labels(kept.iter().map(|s| s.label.as_str()));
    let map_label = histogram.mode().expect("non-empty").to_string();
    let mut metrics = FitMetrics {
        holdout_points: test.len(),
        model_average: None,
        map_structure: None,
        blr: None,
    };
    let mut holdout_average = None;
    if !test.is_empty() {
        let avg = prepared.average(&asts(&kept, max_averaged), &test.xs, model.noise_var)?;
        let per_chain = runs
            .iter()
            .map(|r| {
                let own: Vec<&Sample> = r.kept(schedule.burn_in).iter().collect();
                let post =
                    prepared.average(&asts(&own, max_averaged), &test.xs, model.noise_var)?;
                Ok(Errors::of(&post, test))
            })
            .collect::<Result<Vec<_>, GpError>>()?;
        let map: Vec<&Sample> = kept
            .iter()
            .copied()
            .filter(|s| s.label == map_label)
            .collect();
        let map_post = prepared.average(&asts(&map, max_averaged), &test.xs, model.noise_var)?;
        metrics.model_average = Some(MethodErrors {
            overall: Errors::of(&avg, test),
            per_chain,
        });
        metrics.map_structure = Some(Errors::of(&map_post, test));
        metrics.blr = Some(Errors::of(&blr_baseline(train_raw, &test.xs)?, test));
        holdout_average = Some(avg);
    }
    Ok(FitReport {
        prepared,
        runs,
        histogram,
        map_label,
        metrics,
        holdout_average,
    })
}

/// One hyperparameter-inference method in a comparison.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub mode: HyperMode,
    pub runs: Vec<ChainRun>,
    pub errors: Option<MethodErrors>,
    pub holdout: Option<GpPosterior>,
}

impl MethodRun {
    /// Constrained hyperparameter values of the kept samples, per chain.
    pub fn hypers(&self, burn_in: f64) -> Vec<Vec<Vec<f64>>> {
        self.runs
            .iter()
            .map(|r| {
                r.kept(burn_in)
                    .iter()
                    .map(|s| {
                        s.ast
                            .hyper_addresses()
                            .into_iter()
                            .map(|a| s.ast.hyper(a).expect("own address").constrained)
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Hyperparameters of `structure` redrawn from the prior.
pub fn redraw_hypers<R: rand::Rng + ?Sized>(structure: &KernelAst, rng: &mut R) -> KernelAst {
    let mut ast = structure.clone();
    for addr in structure.hyper_addresses() {
        let offset = structure.hyper(addr).expect("own address").offset;
        ast.set_hyper(addr, sample_hyper(rng, offset))
            .expect("own address");
    }
    ast
}

/// Where the chains of a comparison start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareStart {
    /// Each chain draws its own hyperparameters from the prior.
    #[default]
    Prior,
    /// Every chain starts from the hyperparameters given with the structure.
    Given,
}

/// Infers the hyperparameters of a fixed structure with MH-only and
/// gradient-only schedules from the same per-chain starting points.
#[allow(clippy::too_many_arguments)]
pub fn compare_inference(
    train_raw: &Dataset,
    test: &Dataset,
    standardize: bool,
    model: &Model,
    schedule: &ScheduleConfig,
    structure: &KernelAst,
    start: CompareStart,
    max_averaged: usize,
) -> Result<Vec<MethodRun>, PipelineError> {
    schedule.validate()?;
    let prepared = Prepared::new(train_raw, standardize)?;
    let starts: Vec<String> = (0..schedule.chains)
        .map(|c| match start {
            CompareStart::Prior => {
                let mut rng = chain_rng(schedule.seed, AUX_STREAM + c);
                redraw_hypers(structure, &mut rng).to_json().to_string()
            }
            CompareStart::Given => structure.to_json().to_string(),
        })
        .collect();
    [HyperMode::Mh, HyperMode::Gradient]
        .into_iter()
        .map(|mode| {
            let runs = starts
                .par_iter()
                .enumerate()
                .map(|(c, start)| {
                    let cfg = ScheduleConfig {
                        hyper_mode: mode,
                        structure_steps: 0,
                        initial: Some(start.clone()),
                        ..schedule.clone()
                    };
                    run_chain(std::slice::from_ref(&prepared.train), model, &cfg, c)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let kept = kept_samples(&runs, schedule.burn_in);
            if kept.is_empty() {
                return Err(IoError::NoSamples.into());
            }
            let (mut errors, mut holdout) = (None, None);
            if !test.is_empty() {
                let post =
                    prepared.average(&asts(&kept, max_averaged), &test.xs, model.noise_var)?;
                let per_chain = runs
                    .iter()
                    .map(|r| {
                        let own: Vec<&Sample> = r.kept(schedule.burn_in).iter().collect();
                        let p = prepared.average(
                            &asts(&own, max_averaged),
                            &test.xs,
                            model.noise_var,
                        )?;
                        Ok(Errors::of(&p, test))
                    })
                    .collect::<Result<Vec<_>, GpError>>()?;
                errors = Some(MethodErrors {
                    overall: Errors::of(&post, test),
                    per_chain,
                });
                holdout = Some(post);
            }
            Ok(MethodRun {
                mode,
                runs,
                errors,
                holdout,
            })
        })
        .collect()
}

/// Partition in canonical form rendered with series ids, e.g. `{a,b}{c}`.
pub fn partition_key(partition: &[Vec<usize>], ids: &[String]) -> String {
    partition
        .iter()
        .map(|p| {
            let names: Vec<&str> = p.iter().map(|&i| ids[i].as_str()).collect();
            format!("{{{}}}", names.join(","))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub ids: Vec<String>,
    pub runs: Vec<ClusterRun>,
    /// Histogram over partitions of the kept samples of all chains.
    pub partitions: Histogram,
}

/// Standardizes each series on its own (if asked) and runs the CRP mixture.
pub fn cluster_series(
    series: &[(String, Dataset)],
    standardize: bool,
    model: &Model,
    schedule: &ScheduleConfig,
    cluster: &ClusterConfig,
) -> Result<ClusterReport, PipelineError> {
    let data = series
        .iter()
        .map(|(_, d)| Ok(Prepared::new(d, standardize)?.train))
        .collect::<Result<Vec<_>, IoError>>()?;
    let runs = run_cluster_schedule(&data, model, schedule, cluster)?;
    let ids: Vec<String> = series.iter().map(|(id, _)| id.clone()).collect();
    let keys: Vec<String> = runs
        .iter()
        .flat_map(|r| r.kept(schedule.burn_in))
        .map(|s| partition_key(&s.partition, &ids))
        .collect();
    if keys.is_empty() {
        return Err(IoError::NoSamples.into());
    }
    let partitions = Histogram::from_labels(keys.iter().map(String::as_str));
    Ok(ClusterReport {
        ids,
        runs,
        partitions,
    })
}
