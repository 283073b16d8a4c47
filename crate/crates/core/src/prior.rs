//! Generative prior over kernel ASTs and its exact log density.
//!
//! Every node flips a branch coin. Branches draw an operator, leaves draw a
//! base kernel, and every hyperparameter is `Exp(1)` above its offset,
//! generated through the logistic reparameterization. Nodes at the depth cap
//! are forced leaves and contribute no branch factor.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    is_descendant, left, level, right, softplus, BaseKernel, HyperSite, KernelAst, NodeBundle,
    NodeIndex, NodeKind, Operator,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("p_branch must lie in [0, 1), got {0}")]
    BranchProbability(f64),
    #[error("{name} weights must be non-negative and sum to 1")]
    Weights { name: &'static str },
    #[error("max_depth must be between 1 and 60, got {0}")]
    MaxDepth(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub p_branch: f64,
    /// Weights over WN, C, LIN, SE, PER.
    pub kernel_weights: [f64; 5],
    /// Weights over +, *, CP.
    pub operator_weights: [f64; 3],
    /// Number of tree levels; nodes on the last level are forced leaves.
    pub max_depth: u32,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            p_branch: 0.3,
            kernel_weights: [0.2; 5],
            operator_weights: [0.45, 0.45, 0.10],
            max_depth: 10,
        }
    }
}

fn check_weights(w: &[f64], name: &'static str) -> Result<(), PriorError> {
    let total: f64 = w.iter().sum();
    if w.iter().any(|&p| p.is_nan() || p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(PriorError::Weights { name });
    }
    Ok(())
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        if !(0.0..1.0).contains(&self.p_branch) {
            return Err(PriorError::BranchProbability(self.p_branch));
        }
        check_weights(&self.kernel_weights, "kernel")?;
        check_weights(&self.operator_weights, "operator")?;
        if !(1..=60).contains(&self.max_depth) {
            return Err(PriorError::MaxDepth(self.max_depth));
        }
        Ok(())
    }

    pub fn is_forced_leaf(&self, n: NodeIndex) -> bool {
        level(n) >= self.max_depth
    }
}

/// Maps a uniform draw to a hyperparameter site: `t = logit(u)`, giving
/// `h = -log(u) + offset`.
pub fn hyper_from_uniform(u: f64, offset: f64) -> HyperSite {
    HyperSite::from_unconstrained((u / (1.0 - u)).ln(), offset)
}

pub fn sample_hyper<R: Rng + ?Sized>(rng: &mut R, offset: f64) -> HyperSite {
    let u: f64 = rng.sample(Open01);
    hyper_from_uniform(u, offset)
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples a subtree rooted at `node`; indices in the result are absolute.
pub fn sample_ast<R: Rng + ?Sized>(cfg: &PriorConfig, node: NodeIndex, rng: &mut R) -> KernelAst {
    let mut nodes = BTreeMap::new();
    sample_into(cfg, node, rng, &mut nodes);
    KernelAst::from_nodes(nodes)
}

fn sample_into<R: Rng + ?Sized>(
    cfg: &PriorConfig,
    n: NodeIndex,
    rng: &mut R,
    nodes: &mut BTreeMap<NodeIndex, NodeBundle>,
) {
    let branch = !cfg.is_forced_leaf(n) && rng.random::<f64>() < cfg.p_branch;
    if branch {
        let op = Operator::ALL[categorical(rng, &cfg.operator_weights)];
        let hypers = op
            .offsets()
            .iter()
            .map(|&off| sample_hyper(rng, off))
            .collect();
        nodes.insert(
            n,
            NodeBundle {
                kind: NodeKind::Branch(op),
                hypers,
            },
        );
        sample_into(cfg, left(n), rng, nodes);
        sample_into(cfg, right(n), rng, nodes);
    } else {
        let k = BaseKernel::ALL[categorical(rng, &cfg.kernel_weights)];
        let hypers = k
            .offsets()
            .iter()
            .map(|&off| sample_hyper(rng, off))
            .collect();
        nodes.insert(
            n,
            NodeBundle {
                kind: NodeKind::Leaf(k),
                hypers,
            },
        );
    }
}

/// `Exp(1)` log density of a constrained value above its offset.
pub fn hyper_log_density(site: &HyperSite) -> f64 {
    let v = site.constrained - site.offset;
    if v > 0.0 {
        -v
    } else {
        f64::NEG_INFINITY
    }
}

/// Standard-logistic log density: the hyper prior expressed in `t`.
pub fn logistic_log_density(t: f64) -> f64 {
    -softplus(t) - softplus(-t)
}

/// d/dt of [`logistic_log_density`].
pub fn logistic_log_density_grad(t: f64) -> f64 {
    -(t / 2.0).tanh()
}

fn node_log_prior(cfg: &PriorConfig, n: NodeIndex, b: &NodeBundle, with_hypers: bool) -> f64 {
    let forced = cfg.is_forced_leaf(n);
    let structural = match b.kind {
        NodeKind::Branch(_) if forced => return f64::NEG_INFINITY,
        NodeKind::Branch(op) => cfg.p_branch.ln() + cfg.operator_weights[op.index()].ln(),
        NodeKind::Leaf(k) => {
            let flip = if forced {
                0.0
            } else {
                (1.0 - cfg.p_branch).ln()
            };
            flip + cfg.kernel_weights[k.index()].ln()
        }
    };
    if with_hypers {
        structural + b.hypers.iter().map(hyper_log_density).sum::<f64>()
    } else {
        structural
    }
}

fn log_prior_over(
    cfg: &PriorConfig,
    ast: &KernelAst,
    keep: impl Fn(NodeIndex) -> bool,
    with_hypers: bool,
) -> f64 {
    if ast.validate().is_err() {
        return f64::NEG_INFINITY;
    }
    ast.nodes()
        .filter(|&(n, _)| keep(n))
        .map(|(n, b)| node_log_prior(cfg, n, b, with_hypers))
        .sum()
}

/// Log prior density of the whole tree, over constrained hyperparameters.
/// Inconsistent trees get `-inf`.
pub fn ast_log_prior(cfg: &PriorConfig, ast: &KernelAst) -> f64 {
    log_prior_over(cfg, ast, |_| true, true)
}

/// Log prior mass of the skeleton alone.
pub fn structure_log_prior(cfg: &PriorConfig, ast: &KernelAst) -> f64 {
    log_prior_over(cfg, ast, |_| true, false)
}

/// Log density of resimulating the subtree at `root` given the rest of the
/// tree; this is the forward density of a resimulation proposal.
pub fn subtree_log_prior(cfg: &PriorConfig, ast: &KernelAst, root: NodeIndex) -> f64 {
    log_prior_over(cfg, ast, |n| is_descendant(n, root), true)
}
