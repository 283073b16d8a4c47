//! Posterior summaries: structure histograms, model averaging and errors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::gp::{predict, Dataset, GpError, GpPosterior};
use crate::kernel::KernelAst;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramEntry {
    pub label: String,
    pub count: usize,
    pub mass: f64,
}

/// Label counts, most frequent first, ties by label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub total: usize,
    pub entries: Vec<HistogramEntry>,
}

impl Histogram {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in labels {
            *counts.entry(l).or_default() += 1;
        }
        let total: usize = counts.values().sum();
        let mut entries: Vec<HistogramEntry> = counts
            .into_iter()
            .map(|(label, count)| HistogramEntry {
                label: label.to_string(),
                count,
                mass: count as f64 / total as f64,
            })
            .collect();
        entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
        Histogram { total, entries }
    }

    /// The most frequent label.
    pub fn mode(&self) -> Option<&str> {
        self.entries.first().map(|e| e.label.as_str())
    }

    pub fn mass(&self, label: &str) -> f64 {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map_or(0.0, |e| e.mass)
    }
}

/// Up to `max` items spread evenly over `items`, keeping order.
pub fn thin<T>(items: &[T], max: usize) -> Vec<&T> {
    if items.len() <= max {
        return items.iter().collect();
    }
    (0..max).map(|k| &items[k * items.len() / max]).collect()
}

/// Equal-weight mixture of the GP posteriors of `asts`, summarized by its
/// mean and covariance. The noise variance is the shared observation noise.
pub fn model_average(
    asts: &[&KernelAst],
    train: &Dataset,
    probe: &[f64],
    noise_var: f64,
) -> Result<GpPosterior, GpError> {
    let m = probe.len();
    let mut mean = DVector::zeros(m);
    let mut second = DMatrix::zeros(m, m);
    for ast in asts {
        let p = predict(ast, train, probe, noise_var)?;
        second += &p.cov + &p.mean * p.mean.transpose();
        mean += &p.mean;
    }
    let k = asts.len().max(1) as f64;
    mean /= k;
    second /= k;
    let cov = second - &mean * mean.transpose();
    Ok(GpPosterior {
        at: probe.to_vec(),
        mean,
        cov,
        noise_var,
    })
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(
        pred.len(),
        truth.len(),
        "prediction and truth lengths differ"
    );
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    mse(pred, truth).sqrt()
}

/// Error of a posterior mean on held-out points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Errors {
    pub mse: f64,
    pub rmse: f64,
}

impl Errors {
    pub fn of(post: &GpPosterior, test: &Dataset) -> Self {
        let pred: Vec<f64> = post.mean.iter().copied().collect();
        let mse = mse(&pred, &test.ys);
        Errors {
            mse,
            rmse: mse.sqrt(),
        }
    }
}
