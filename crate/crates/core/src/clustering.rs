//! CRP mixture over several series, with one kernel AST per cluster.
//!
//! Series are reassigned one at a time with a single auxiliary prior tree
//! for the "new cluster" option; every cluster's tree is then moved with
//! the ordinary structure and hyperparameter moves against its members.
//! Members of a cluster are independent draws from the cluster's GP, so
//! their log likelihoods add.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gp::{log_marginal, Dataset};
use crate::inference::{
    burn_in_count, chain_rng, hyper_moves, structure_moves, InferenceError, Model, ScheduleConfig,
    TraceState,
};
use crate::kernel::{KernelAst, ROOT};
use crate::prior::{ast_log_prior, sample_ast};

pub const DEFAULT_CONCENTRATION: f64 = 0.5;

/// Log probability of a partition under a CRP, given each item's cluster id.
pub fn crp_log_prior(assignments: &[usize], concentration: f64) -> f64 {
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in assignments {
        *sizes.entry(c).or_default() += 1;
    }
    let clusters: f64 = sizes
        .values()
        .map(|&n| concentration.ln() + (1..n).map(|i| (i as f64).ln()).sum::<f64>())
        .sum();
    let normalizer: f64 = (0..assignments.len())
        .map(|i| (concentration + i as f64).ln())
        .sum();
    clusters - normalizer
}

/// Canonical partition: members sorted, clusters ordered by smallest member.
pub fn canonical_partition(assignments: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignments.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut parts: Vec<Vec<usize>> = groups.into_values().collect();
    parts.sort_by_key(|p| p[0]);
    parts
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReassignStats {
    pub moves: u64,
    /// Candidate clusters given zero weight because their likelihood failed.
    pub numeric_failures: u64,
}

/// Assignments of series to clusters plus one chain state per cluster.
#[derive(Debug, Clone)]
pub struct ClusterState {
    series: Vec<Dataset>,
    assignments: Vec<usize>,
    clusters: BTreeMap<usize, TraceState>,
    concentration: f64,
    model: Model,
    next_id: usize,
    pub stats: ReassignStats,
}

impl ClusterState {
    /// Builds a state from explicit assignments and one tree per cluster id.
    pub fn new(
        series: Vec<Dataset>,
        assignments: Vec<usize>,
        asts: BTreeMap<usize, KernelAst>,
        concentration: f64,
        model: Model,
    ) -> Result<Self, InferenceError> {
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(InferenceError::Config(format!(
                "concentration must be positive, got {concentration}"
            )));
        }
        if series.is_empty() || assignments.len() != series.len() {
            return Err(InferenceError::Config(
                "need one assignment for each of at least one series".into(),
            ));
        }
        let mut clusters = BTreeMap::new();
        for (&id, ast) in &asts {
            let members = member_data(&series, &assignments, id);
            if members.is_empty() {
                return Err(InferenceError::Config(format!(
                    "cluster {id} has no members"
                )));
            }
            clusters.insert(
                id,
                TraceState::with_series(ast.clone(), members, model.clone())?,
            );
        }
        if let Some(c) = assignments.iter().find(|c| !clusters.contains_key(c)) {
            return Err(InferenceError::Config(format!("cluster {c} has no tree")));
        }
        let next_id = clusters.keys().last().map_or(0, |&k| k + 1);
        Ok(ClusterState {
            series,
            assignments,
            clusters,
            concentration,
            model,
            next_id,
            stats: ReassignStats::default(),
        })
    }

    /// Draws a partition from the CRP and one prior tree per cluster.
    pub fn from_prior<R: Rng + ?Sized>(
        series: Vec<Dataset>,
        concentration: f64,
        model: Model,
        rng: &mut R,
    ) -> Result<Self, InferenceError> {
        let mut assignments: Vec<usize> = Vec::with_capacity(series.len());
        let mut sizes: Vec<usize> = Vec::new();
        for i in 0..series.len() {
            let u: f64 = rng.random::<f64>() * (i as f64 + concentration);
            let mut acc = 0.0;
            let mut pick = sizes.len();
            for (c, &n) in sizes.iter().enumerate() {
                acc += n as f64;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            if pick == sizes.len() {
                sizes.push(0);
            }
            sizes[pick] += 1;
            assignments.push(pick);
        }
        let mut clusters = BTreeMap::new();
        for id in 0..sizes.len() {
            let members = member_data(&series, &assignments, id);
            clusters.insert(id, TraceState::from_prior(members, model.clone(), rng)?);
        }
        Ok(ClusterState {
            series,
            assignments,
            next_id: clusters.len(),
            clusters,
            concentration,
            model,
            stats: ReassignStats::default(),
        })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn partition(&self) -> Vec<Vec<usize>> {
        canonical_partition(&self.assignments)
    }

    /// Structure label of each cluster in canonical partition order.
    pub fn labels(&self) -> Vec<String> {
        self.partition()
            .iter()
            .map(|p| {
                self.clusters[&self.assignments[p[0]]]
                    .ast()
                    .structure_label()
            })
            .collect()
    }

    pub fn cluster_ast(&self, id: usize) -> Option<&KernelAst> {
        self.clusters.get(&id).map(TraceState::ast)
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Joint log probability from the cached per-cluster densities.
    pub fn log_joint(&self) -> f64 {
        crp_log_prior(&self.assignments, self.concentration)
            + self
                .clusters
                .values()
                .map(TraceState::log_joint)
                .sum::<f64>()
    }

    /// Joint log probability recomputed from scratch.
    pub fn recompute_log_joint(&self) -> Result<f64, InferenceError> {
        let mut total = crp_log_prior(&self.assignments, self.concentration);
        for (i, c) in self.assignments.iter().enumerate() {
            total += log_marginal(
                self.clusters[c].ast(),
                &self.series[i],
                self.model.noise_var,
            )?;
        }
        for state in self.clusters.values() {
            total += ast_log_prior(&self.model.prior, state.ast());
        }
        Ok(total)
    }

    fn refresh(&mut self, id: usize) -> Result<(), InferenceError> {
        let members = member_data(&self.series, &self.assignments, id);
        if members.is_empty() {
            self.clusters.remove(&id);
            return Ok(());
        }
        self.clusters
            .get_mut(&id)
            .expect("cluster exists")
            .set_data(members)
    }

    /// Resamples the cluster of series `i` given all other assignments.
    pub fn reassign_series_step<R: Rng + ?Sized>(
        &mut self,
        i: usize,
        rng: &mut R,
    ) -> Result<(), InferenceError> {
        let old = self.assignments[i];
        let singleton = self.assignments.iter().filter(|&&c| c == old).count() == 1;
        // a series alone in its cluster keeps that tree as the auxiliary one
        let aux = if singleton {
            self.clusters[&old].ast().clone()
        } else {
            sample_ast(&self.model.prior, ROOT, rng)
        };
        let y = &self.series[i];
        let mut candidates: Vec<(Option<usize>, f64)> = Vec::new();
        for (&id, state) in &self.clusters {
            let n = self
                .assignments
                .iter()
                .enumerate()
                .filter(|&(j, &c)| j != i && c == id)
                .count();
            if n == 0 {
                continue;
            }
            candidates.push((
                Some(id),
                (n as f64).ln() + self.member_loglik(state.ast(), y),
            ));
        }
        candidates.push((None, self.concentration.ln() + self.member_loglik(&aux, y)));
        self.stats.moves += 1;
        self.stats.numeric_failures += candidates
            .iter()
            .filter(|c| c.1 == f64::NEG_INFINITY)
            .count() as u64;
        let max = candidates
            .iter()
            .map(|c| c.1)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(InferenceError::Config(format!(
                "series {i} has no cluster with a finite likelihood"
            )));
        }
        let weights: Vec<f64> = candidates.iter().map(|c| (c.1 - max).exp()).collect();
        let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
        let mut pick = candidates.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                pick = k;
                break;
            }
            u -= w;
        }
        let target = match candidates[pick].0 {
            Some(id) => id,
            None if singleton => old,
            None => {
                let id = self.next_id;
                self.next_id += 1;
                self.clusters.insert(
                    id,
                    TraceState::with_series(aux, vec![y.clone()], self.model.clone())?,
                );
                self.assignments[i] = id;
                return self.refresh(old);
            }
        };
        if target != old {
            self.assignments[i] = target;
            self.refresh(old)?;
            self.refresh(target)?;
        }
        Ok(())
    }

    fn member_loglik(&self, ast: &KernelAst, y: &Dataset) -> f64 {
        log_marginal(ast, y, self.model.noise_var).unwrap_or(f64::NEG_INFINITY)
    }
}

fn member_data(series: &[Dataset], assignments: &[usize], id: usize) -> Vec<Dataset> {
    series
        .iter()
        .zip(assignments)
        .filter(|&(_, &c)| c == id)
        .map(|(d, _)| d.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub concentration: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            concentration: DEFAULT_CONCENTRATION,
        }
    }
}

/// One recorded state of a cluster chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSample {
    pub sweep: usize,
    pub partition: Vec<Vec<usize>>,
    pub labels: Vec<String>,
    pub log_joint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRun {
    pub chain: usize,
    pub samples: Vec<ClusterSample>,
}

impl ClusterRun {
    pub fn kept(&self, burn_in: f64) -> &[ClusterSample] {
        &self.samples[burn_in_count(self.samples.len(), burn_in)..]
    }
}

/// Runs one cluster chain: per sweep, tree moves in every cluster, then one
/// reassignment per series.
pub fn run_cluster_chain(
    series: &[Dataset],
    model: &Model,
    schedule: &ScheduleConfig,
    cluster: &ClusterConfig,
    chain: usize,
) -> Result<ClusterRun, InferenceError> {
    schedule.validate()?;
    let mut rng = chain_rng(schedule.seed, chain);
    let mut state = ClusterState::from_prior(
        series.to_vec(),
        cluster.concentration,
        model.clone(),
        &mut rng,
    )?;
    let mut samples = Vec::with_capacity(schedule.sweeps);
    for sweep in 0..schedule.sweeps {
        let wrap = |e| InferenceError::Step {
            chain,
            sweep,
            source: Box::new(e),
        };
        // each cluster gets its own stream so clusters can move in parallel
        let seeds: Vec<u64> = state.clusters.keys().map(|_| rng.random()).collect();
        state
            .clusters
            .values_mut()
            .zip(seeds)
            .collect::<Vec<_>>()
            .into_par_iter()
            .try_for_each(|(c, seed)| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                hyper_moves(c, schedule, &mut r)?;
                structure_moves(c, schedule, &mut r)
            })
            .map_err(wrap)?;
        for i in 0..series.len() {
            state.reassign_series_step(i, &mut rng).map_err(wrap)?;
        }
        samples.push(ClusterSample {
            sweep,
            partition: state.partition(),
            labels: state.labels(),
            log_joint: state.log_joint(),
        });
    }
    Ok(ClusterRun { chain, samples })
}

/// Runs `schedule.chains` independent cluster chains in parallel.
pub fn run_cluster_schedule(
    series: &[Dataset],
    model: &Model,
    schedule: &ScheduleConfig,
    cluster: &ClusterConfig,
) -> Result<Vec<ClusterRun>, InferenceError> {
    schedule.validate()?;
    if series.is_empty() {
        return Err(InferenceError::Config(
            "clustering needs at least one series".into(),
        ));
    }
    (0..schedule.chains)
        .into_par_iter()
        .map(|c| run_cluster_chain(series, model, schedule, cluster, c))
        .collect()
}
