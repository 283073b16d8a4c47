//! MCMC and gradient moves over kernel ASTs and their hyperparameters.
//!
//! A [`TraceState`] holds the current tree, the data it explains and cached
//! factorizations. Structure moves resimulate a uniformly chosen subtree from
//! the prior; hyperparameter moves either resimulate one site from its prior
//! or take a joint gradient-ascent step in the unconstrained coordinates.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{fit, Dataset, GpError, GpFit, DEFAULT_NOISE_VAR};
use crate::kernel::{
    left, right, HyperAddress, HyperSite, KernelAst, KernelError, NodeIndex, NodeKind, Operator,
    ROOT,
};
use crate::prior::{
    ast_log_prior, logistic_log_density, logistic_log_density_grad, sample_ast, sample_hyper,
    structure_log_prior, PriorConfig, PriorError,
};

/// Attempts at drawing an initial tree whose likelihood can be evaluated.
const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("gradient moves do not support the {0} operator")]
    Unsupported(&'static str),
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error("chain {chain}, sweep {sweep}: {source}")]
    Step {
        chain: usize,
        sweep: usize,
        source: Box<InferenceError>,
    },
}

/// Prior and observation model shared by every move.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub prior: PriorConfig,
    pub noise_var: f64,
}

impl Default for Model {
    fn default() -> Self {
        Model {
            prior: PriorConfig::default(),
            noise_var: DEFAULT_NOISE_VAR,
        }
    }
}

/// Proposal and acceptance counts for one move type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MoveCounter {
    pub proposed: u64,
    pub accepted: u64,
    /// Proposals rejected because their likelihood could not be evaluated.
    pub numeric_failures: u64,
}

impl MoveCounter {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MoveStats {
    pub structure: MoveCounter,
    pub hyper: MoveCounter,
    pub gradient: MoveCounter,
}

/// Log likelihood summed over independent series, with one fit per series.
fn evaluate(
    ast: &KernelAst,
    data: &[Dataset],
    noise_var: f64,
) -> Result<(f64, Vec<Option<GpFit>>), GpError> {
    let mut total = 0.0;
    let mut fits = Vec::with_capacity(data.len());
    for d in data {
        let f = fit(ast, d, noise_var)?;
        total += f.as_ref().map_or(0.0, |f| f.log_marginal);
        fits.push(f);
    }
    Ok((total, fits))
}

/// Log joint density with every hyperparameter measured in its unconstrained
/// coordinate: the objective of gradient moves.
pub fn unconstrained_log_joint(
    model: &Model,
    ast: &KernelAst,
    data: &[Dataset],
) -> Result<f64, InferenceError> {
    let (ll, _) = evaluate(ast, data, model.noise_var)?;
    let hypers: f64 = ast
        .nodes()
        .flat_map(|(_, b)| b.hypers.iter())
        .map(|h| logistic_log_density(h.unconstrained))
        .sum();
    Ok(ll + structure_log_prior(&model.prior, ast) + hypers)
}

/// Whether gradient moves can differentiate through every node of `ast`.
pub fn supports_gradient(ast: &KernelAst) -> bool {
    !ast.contains_operator(Operator::ChangePoint)
}

/// The chain state: a tree, its data, and cached densities.
#[derive(Debug, Clone)]
pub struct TraceState {
    ast: KernelAst,
    data: Vec<Dataset>,
    model: Model,
    log_likelihood: f64,
    log_prior: f64,
    fits: Vec<Option<GpFit>>,
    pub stats: MoveStats,
}

impl TraceState {
    /// State over one series.
    pub fn new(ast: KernelAst, data: Dataset, model: Model) -> Result<Self, InferenceError> {
        Self::with_series(ast, vec![data], model)
    }

    /// State over several independent series sharing one tree.
    pub fn with_series(
        ast: KernelAst,
        data: Vec<Dataset>,
        model: Model,
    ) -> Result<Self, InferenceError> {
        model.prior.validate()?;
        ast.validate()?;
        let log_prior = ast_log_prior(&model.prior, &ast);
        if log_prior == f64::NEG_INFINITY {
            return Err(InferenceError::Config(format!(
                "tree {} has zero prior probability",
                ast.structure_label()
            )));
        }
        let (log_likelihood, fits) = evaluate(&ast, &data, model.noise_var)?;
        Ok(TraceState {
            ast,
            data,
            model,
            log_likelihood,
            log_prior,
            fits,
            stats: MoveStats::default(),
        })
    }

    /// State started from a prior draw; draws whose likelihood cannot be
    /// evaluated are discarded.
    pub fn from_prior<R: Rng + ?Sized>(
        data: Vec<Dataset>,
        model: Model,
        rng: &mut R,
    ) -> Result<Self, InferenceError> {
        let mut last = None;
        for _ in 0..INIT_ATTEMPTS {
            let ast = sample_ast(&model.prior, ROOT, rng);
            match Self::with_series(ast, data.clone(), model.clone()) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn ast(&self) -> &KernelAst {
        &self.ast
    }

    pub fn data(&self) -> &[Dataset] {
        &self.data
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn log_prior(&self) -> f64 {
        self.log_prior
    }

    pub fn log_joint(&self) -> f64 {
        self.log_likelihood + self.log_prior
    }

    pub fn fits(&self) -> &[Option<GpFit>] {
        &self.fits
    }

    /// Replaces the data, keeping the tree.
    pub fn set_data(&mut self, data: Vec<Dataset>) -> Result<(), InferenceError> {
        let (ll, fits) = evaluate(&self.ast, &data, self.model.noise_var)?;
        self.data = data;
        self.log_likelihood = ll;
        self.fits = fits;
        Ok(())
    }

    /// Unnormalized log posterior in unconstrained hyperparameter coordinates.
    pub fn unconstrained_log_joint(&self) -> f64 {
        let hypers: f64 = self
            .ast
            .nodes()
            .flat_map(|(_, b)| b.hypers.iter())
            .map(|h| logistic_log_density(h.unconstrained))
            .sum();
        self.log_likelihood + structure_log_prior(&self.model.prior, &self.ast) + hypers
    }

    fn adopt(&mut self, ast: KernelAst, ll: f64, fits: Vec<Option<GpFit>>) {
        self.log_prior = ast_log_prior(&self.model.prior, &ast);
        self.ast = ast;
        self.log_likelihood = ll;
        self.fits = fits;
    }

    /// Resimulation move on the subtree at `node`. Returns whether the
    /// proposal was accepted. With `node_correction` the ratio includes
    /// `N(T)/N(T')` for uniform node selection.
    pub fn mh_structure_at<R: Rng + ?Sized>(
        &mut self,
        node: NodeIndex,
        node_correction: bool,
        rng: &mut R,
    ) -> Result<bool, InferenceError> {
        self.ast.node(node)?;
        let mut proposal = self.ast.clone();
        proposal.replace_subtree(node, sample_ast(&self.model.prior, node, rng));
        self.stats.structure.proposed += 1;
        let Ok((ll, fits)) = evaluate(&proposal, &self.data, self.model.noise_var) else {
            self.stats.structure.numeric_failures += 1;
            return Ok(false);
        };
        let mut log_alpha = ll - self.log_likelihood;
        if node_correction {
            log_alpha += (self.ast.len() as f64).ln() - (proposal.len() as f64).ln();
        }
        if accept(log_alpha, rng) {
            self.stats.structure.accepted += 1;
            self.adopt(proposal, ll, fits);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Resimulation move on a uniformly chosen subtree.
    pub fn mh_structure_step<R: Rng + ?Sized>(
        &mut self,
        node_correction: bool,
        rng: &mut R,
    ) -> Result<bool, InferenceError> {
        let indices = self.ast.indices();
        let node = indices[rng.random_range(0..indices.len())];
        self.mh_structure_at(node, node_correction, rng)
    }

    /// Resimulates one hyperparameter site from its prior and accepts with
    /// the likelihood ratio.
    pub fn mh_hyper_at<R: Rng + ?Sized>(
        &mut self,
        addr: HyperAddress,
        rng: &mut R,
    ) -> Result<bool, InferenceError> {
        let offset = self.ast.hyper(addr)?.offset;
        let mut proposal = self.ast.clone();
        proposal.set_hyper(addr, sample_hyper(rng, offset))?;
        self.stats.hyper.proposed += 1;
        let Ok((ll, fits)) = evaluate(&proposal, &self.data, self.model.noise_var) else {
            self.stats.hyper.numeric_failures += 1;
            return Ok(false);
        };
        if accept(ll - self.log_likelihood, rng) {
            self.stats.hyper.accepted += 1;
            self.adopt(proposal, ll, fits);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// [`TraceState::mh_hyper_at`] on a uniformly chosen site.
    pub fn mh_hyper_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool, InferenceError> {
        let sites = self.ast.hyper_addresses();
        let addr = sites[rng.random_range(0..sites.len())];
        self.mh_hyper_at(addr, rng)
    }

    /// Gradient of [`TraceState::unconstrained_log_joint`] with respect to
    /// every site's unconstrained coordinate, in address order.
    pub fn hyper_gradient(&self) -> Result<Vec<(HyperAddress, f64)>, InferenceError> {
        if !supports_gradient(&self.ast) {
            return Err(InferenceError::Unsupported(Operator::ChangePoint.symbol()));
        }
        let mut dh: BTreeMap<HyperAddress, f64> = self
            .ast
            .hyper_addresses()
            .into_iter()
            .map(|a| (a, 0.0))
            .collect();
        for (d, f) in self.data.iter().zip(&self.fits) {
            let Some(f) = f else { continue };
            let seed = (&f.alpha * f.alpha.transpose() - f.factor.inverse()) * 0.5;
            backprop(&self.ast, &d.xs, seed, &mut dh)?;
        }
        Ok(dh
            .into_iter()
            .map(|(addr, g)| {
                let site = self.ast.hyper(addr).expect("address from this tree");
                let dt = g * site.dconstrained_dt() + logistic_log_density_grad(site.unconstrained);
                (addr, dt)
            })
            .collect())
    }

    /// One joint ascent step `t ← t + γ·∇t`. A step whose result cannot be
    /// evaluated leaves the state unchanged and returns `false`.
    pub fn gradient_step_hypers(&mut self, step_size: f64) -> Result<bool, InferenceError> {
        let grad = self.hyper_gradient()?;
        self.stats.gradient.proposed += 1;
        if step_size == 0.0 {
            self.stats.gradient.accepted += 1;
            return Ok(true);
        }
        let mut next = self.ast.clone();
        for (addr, g) in grad {
            let site = self.ast.hyper(addr)?;
            let t = site.unconstrained + step_size * g;
            let moved = HyperSite::from_unconstrained(t, site.offset);
            if !t.is_finite() || !moved.constrained.is_finite() {
                self.stats.gradient.numeric_failures += 1;
                return Ok(false);
            }
            next.set_hyper(addr, moved)?;
        }
        match evaluate(&next, &self.data, self.model.noise_var) {
            Ok((ll, fits)) => {
                self.stats.gradient.accepted += 1;
                self.adopt(next, ll, fits);
                Ok(true)
            }
            Err(_) => {
                self.stats.gradient.numeric_failures += 1;
                Ok(false)
            }
        }
    }
}

fn accept<R: Rng + ?Sized>(log_alpha: f64, rng: &mut R) -> bool {
    if log_alpha >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_alpha
}

/// Covariance matrix of every subtree over `xs`.
fn subtree_covs(
    ast: &KernelAst,
    n: NodeIndex,
    xs: &[f64],
    out: &mut BTreeMap<NodeIndex, DMatrix<f64>>,
) -> Result<DMatrix<f64>, KernelError> {
    let b = ast.node(n)?;
    let c = match b.kind {
        NodeKind::Leaf(_) => ast.cov_matrix(n, xs)?,
        NodeKind::Branch(op) => {
            let l = subtree_covs(ast, left(n), xs, out)?;
            let r = subtree_covs(ast, right(n), xs, out)?;
            match op {
                Operator::Sum => l + r,
                Operator::Product => l.component_mul(&r),
                Operator::ChangePoint => {
                    return Err(KernelError::Inconsistent(
                        "changepoint in gradient tree".into(),
                    ))
                }
            }
        }
    };
    out.insert(n, c.clone());
    Ok(c)
}

/// Pushes `d log p / d C_root` down the tree and accumulates the gradient
/// with respect to each constrained hyperparameter.
fn backprop(
    ast: &KernelAst,
    xs: &[f64],
    seed: DMatrix<f64>,
    dh: &mut BTreeMap<HyperAddress, f64>,
) -> Result<(), KernelError> {
    let mut covs = BTreeMap::new();
    subtree_covs(ast, ROOT, xs, &mut covs)?;
    let mut grads = BTreeMap::from([(ROOT, seed)]);
    // parents have smaller indices than their children
    for (n, b) in ast.nodes() {
        let g = grads.remove(&n).expect("parent visited first");
        match b.kind {
            NodeKind::Branch(Operator::Sum) => {
                grads.insert(left(n), g.clone());
                grads.insert(right(n), g);
            }
            NodeKind::Branch(Operator::Product) => {
                grads.insert(left(n), g.component_mul(&covs[&right(n)]));
                grads.insert(right(n), g.component_mul(&covs[&left(n)]));
            }
            NodeKind::Branch(Operator::ChangePoint) => {
                return Err(KernelError::Inconsistent(
                    "changepoint in gradient tree".into(),
                ))
            }
            NodeKind::Leaf(k) => {
                let h = b.constrained();
                for slot in 0..h.len() {
                    let mut s = 0.0;
                    for j in 0..xs.len() {
                        for i in 0..xs.len() {
                            s += g[(i, j)] * k.eval_grad(&h, slot, xs[i], xs[j]);
                        }
                    }
                    *dh.get_mut(&HyperAddress { node: n, slot }).expect("site") += s;
                }
            }
        }
    }
    Ok(())
}

/// How hyperparameter moves are carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperMode {
    /// Single-site prior resimulation.
    Mh,
    /// Joint gradient steps; trees with a changepoint fall back to MH.
    Gradient,
    /// Alternates gradient steps and single-site MH.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sweeps: usize,
    pub hyper_steps: usize,
    pub structure_steps: usize,
    pub step_size: f64,
    pub chains: usize,
    pub seed: u64,
    /// Fraction of leading samples discarded when summarizing a chain.
    pub burn_in: f64,
    pub hyper_mode: HyperMode,
    /// Include the `N(T)/N(T')` node-selection factor in structure moves.
    pub node_correction: bool,
    /// Optional starting tree in JSON form; drawn from the prior if absent.
    #[serde(
        deserialize_with = "tree_literal_opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub initial: Option<String>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            sweeps: 100,
            hyper_steps: 100,
            structure_steps: 100,
            step_size: 0.01,
            chains: 1,
            seed: 0,
            burn_in: 0.2,
            hyper_mode: HyperMode::Gradient,
            node_correction: true,
            initial: None,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.chains == 0 {
            return Err(InferenceError::Config("chains must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(InferenceError::Config(format!(
                "burn_in must lie in [0, 1), got {}",
                self.burn_in
            )));
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return Err(InferenceError::Config(format!(
                "step_size must be finite and non-negative, got {}",
                self.step_size
            )));
        }
        if let Some(init) = &self.initial {
            KernelAst::from_json_str(init)?;
        }
        Ok(())
    }
}

/// Reads a tree either as a JSON string or as a native nested list.
pub fn tree_literal<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    Ok(match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    })
}

fn tree_literal_opt<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    tree_literal(d).map(Some)
}

/// One recorded chain state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sweep: usize,
    pub label: String,
    pub ast: KernelAst,
    pub log_likelihood: f64,
    pub log_prior: f64,
}

impl Sample {
    fn of(sweep: usize, state: &TraceState) -> Self {
        Sample {
            sweep,
            label: state.ast.structure_label(),
            ast: state.ast.clone(),
            log_likelihood: state.log_likelihood,
            log_prior: state.log_prior,
        }
    }

    pub fn log_joint(&self) -> f64 {
        self.log_likelihood + self.log_prior
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub chain: usize,
    pub samples: Vec<Sample>,
    pub stats: MoveStats,
}

impl ChainRun {
    /// Samples left after discarding the leading `burn_in` fraction.
    pub fn kept(&self, burn_in: f64) -> &[Sample] {
        &self.samples[burn_in_count(self.samples.len(), burn_in)..]
    }
}

pub fn burn_in_count(len: usize, burn_in: f64) -> usize {
    ((len as f64) * burn_in).floor() as usize
}

/// The RNG of chain `chain` under `seed`; chains use disjoint streams.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Applies one sweep's hyperparameter moves.
pub fn hyper_moves<R: Rng + ?Sized>(
    state: &mut TraceState,
    cfg: &ScheduleConfig,
    rng: &mut R,
) -> Result<(), InferenceError> {
    for step in 0..cfg.hyper_steps {
        let gradient = match cfg.hyper_mode {
            HyperMode::Mh => false,
            HyperMode::Gradient => true,
            HyperMode::Mixed => step % 2 == 0,
        };
        if gradient && supports_gradient(&state.ast) {
            state.gradient_step_hypers(cfg.step_size)?;
        } else {
            state.mh_hyper_step(rng)?;
        }
    }
    Ok(())
}

/// Applies one sweep's structure moves.
pub fn structure_moves<R: Rng + ?Sized>(
    state: &mut TraceState,
    cfg: &ScheduleConfig,
    rng: &mut R,
) -> Result<(), InferenceError> {
    for _ in 0..cfg.structure_steps {
        state.mh_structure_step(cfg.node_correction, rng)?;
    }
    Ok(())
}

/// Runs one chain over independent series sharing a tree.
pub fn run_chain(
    data: &[Dataset],
    model: &Model,
    cfg: &ScheduleConfig,
    chain: usize,
) -> Result<ChainRun, InferenceError> {
    cfg.validate()?;
    let mut rng = chain_rng(cfg.seed, chain);
    let mut state = match &cfg.initial {
        Some(init) => TraceState::with_series(
            KernelAst::from_json_str(init)?,
            data.to_vec(),
            model.clone(),
        )?,
        None => TraceState::from_prior(data.to_vec(), model.clone(), &mut rng)?,
    };
    let mut samples = Vec::with_capacity(cfg.sweeps);
    for sweep in 0..cfg.sweeps {
        let wrap = |e| InferenceError::Step {
            chain,
            sweep,
            source: Box::new(e),
        };
        hyper_moves(&mut state, cfg, &mut rng).map_err(wrap)?;
        structure_moves(&mut state, cfg, &mut rng).map_err(wrap)?;
        samples.push(Sample::of(sweep, &state));
    }
    Ok(ChainRun {
        chain,
        samples,
        stats: state.stats,
    })
}

/// Runs `cfg.chains` independent chains in parallel.
pub fn run_schedule(
    data: &Dataset,
    model: &Model,
    cfg: &ScheduleConfig,
) -> Result<Vec<ChainRun>, InferenceError> {
    cfg.validate()?;
    let data = std::slice::from_ref(data);
    (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(data, model, cfg, c))
        .collect()
}
