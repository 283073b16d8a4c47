//! Bayesian structure discovery for univariate time series.
//!
//! Covariance kernels are binary ASTs over five base kernels (WN, C, LIN,
//! SE, PER) joined by sum, product and changepoint. A prior over ASTs and an
//! exact GP likelihood define a posterior over structures, explored with
//! resimulation Metropolis-Hastings on subtrees, per-site MH on
//! hyperparameters, and reverse-mode gradient ascent through the tree. A CRP
//! mixture clusters several series by shared structure.

pub mod baseline;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod gp;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod pipeline;
pub mod prior;
pub mod summary;
pub mod synth;

#[cfg(test)]
mod testutil;

pub use clustering::{ClusterConfig, ClusterState};
pub use gp::{Dataset, GpError, GpPosterior};
pub use inference::{HyperMode, InferenceError, Model, ScheduleConfig, TraceState};
pub use kernel::{
    BaseKernel, HyperAddress, HyperSite, KernelAst, KernelError, NodeIndex, Operator,
};
pub use prior::PriorConfig;
