//! Exact GP marginal likelihood and posterior prediction under a kernel AST.
//!
//! Every covariance gets a fixed observation-noise diagonal added before
//! factorization. Factorizations that fail are retried with a jitter that
//! starts at `1e-8` and grows tenfold up to `1e-2`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::kernel::{KernelAst, KernelError, ROOT};

pub const DEFAULT_NOISE_VAR: f64 = 0.1;

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("Cholesky factorization failed after jitter levels {attempted:?}")]
    Cholesky { attempted: Vec<f64> },
    #[error("non-finite covariance entry")]
    NonFinite,
    #[error("noise variance must be positive and finite, got {0}")]
    InvalidNoise(f64),
    #[error("dataset has {xs} inputs but {ys} outputs")]
    Shape { xs: usize, ys: usize },
    #[error("non-finite value in dataset")]
    NonFiniteData,
}

/// Paired inputs and outputs of one series.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, GpError> {
        if xs.len() != ys.len() {
            return Err(GpError::Shape {
                xs: xs.len(),
                ys: ys.len(),
            });
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(GpError::NonFiniteData);
        }
        Ok(Dataset { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.ys)
    }

    /// Subset by row indices, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            xs: rows.iter().map(|&i| self.xs[i]).collect(),
            ys: rows.iter().map(|&i| self.ys[i]).collect(),
        }
    }
}

fn check_noise(noise_var: f64) -> Result<(), GpError> {
    if noise_var > 0.0 && noise_var.is_finite() {
        Ok(())
    } else {
        Err(GpError::InvalidNoise(noise_var))
    }
}

/// Cholesky factor of a symmetric matrix plus the jitter it needed.
#[derive(Debug, Clone)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn new(a: DMatrix<f64>) -> Result<Self, GpError> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Factor { chol, jitter: 0.0 });
        }
        let mut attempted = Vec::new();
        let mut jitter = JITTER_START;
        while jitter <= JITTER_MAX * (1.0 + 1e-12) {
            attempted.push(jitter);
            let mut aj = a.clone();
            for i in 0..aj.nrows() {
                aj[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(aj) {
                return Ok(Factor { chol, jitter });
            }
            jitter *= 10.0;
        }
        Err(GpError::Cholesky { attempted })
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solves `L v = b` for the lower factor `L`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a non-zero diagonal")
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factorized `K + noise·I` for one dataset.
#[derive(Debug, Clone)]
pub struct GpFit {
    pub factor: Factor,
    /// `(K + noise·I)^{-1} y`
    pub alpha: DVector<f64>,
    pub log_marginal: f64,
}

pub fn noisy_cov(ast: &KernelAst, xs: &[f64], noise_var: f64) -> Result<DMatrix<f64>, GpError> {
    let mut k = ast.cov_matrix(ROOT, xs)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var;
    }
    Ok(k)
}

/// Factorizes and evaluates the marginal likelihood. `None` for empty data.
pub fn fit(ast: &KernelAst, data: &Dataset, noise_var: f64) -> Result<Option<GpFit>, GpError> {
    check_noise(noise_var)?;
    if data.is_empty() {
        return Ok(None);
    }
    let factor = Factor::new(noisy_cov(ast, &data.xs, noise_var)?)?;
    let y = data.y_vector();
    let alpha = factor.solve_vec(&y);
    let n = data.len() as f64;
    let log_marginal = -0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n * (2.0 * PI).ln();
    if !log_marginal.is_finite() {
        return Err(GpError::NonFinite);
    }
    Ok(Some(GpFit {
        factor,
        alpha,
        log_marginal,
    }))
}

/// `log N(y | 0, K + noise·I)`; zero for an empty dataset.
pub fn log_marginal(ast: &KernelAst, data: &Dataset, noise_var: f64) -> Result<f64, GpError> {
    Ok(fit(ast, data, noise_var)?.map_or(0.0, |f| f.log_marginal))
}

/// Predictive distribution of the latent function at probe inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub at: Vec<f64>,
    pub mean: DVector<f64>,
    /// Latent (noiseless) covariance.
    pub cov: DMatrix<f64>,
    /// Observation noise added by [`GpPosterior::noisy`].
    pub noise_var: f64,
}

impl GpPosterior {
    /// The same posterior with observation noise folded into `cov`.
    pub fn noisy(&self) -> GpPosterior {
        let mut cov = self.cov.clone();
        for i in 0..cov.nrows() {
            cov[(i, i)] += self.noise_var;
        }
        GpPosterior {
            at: self.at.clone(),
            mean: self.mean.clone(),
            cov,
            noise_var: 0.0,
        }
    }

    pub fn std_noiseless(&self) -> Vec<f64> {
        self.cov
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }

    pub fn std_noisy(&self) -> Vec<f64> {
        self.cov
            .diagonal()
            .iter()
            .map(|v| (v.max(0.0) + self.noise_var).sqrt())
            .collect()
    }
}

/// Conditions the GP on `train` and evaluates it at `probe`.
pub fn predict(
    ast: &KernelAst,
    train: &Dataset,
    probe: &[f64],
    noise_var: f64,
) -> Result<GpPosterior, GpError> {
    check_noise(noise_var)?;
    let m = probe.len();
    if m == 0 {
        return Ok(GpPosterior {
            at: vec![],
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
            noise_var,
        });
    }
    let kss = ast.cov_matrix(ROOT, probe)?;
    let Some(fitted) = fit(ast, train, noise_var)? else {
        return Ok(GpPosterior {
            at: probe.to_vec(),
            mean: DVector::zeros(m),
            cov: kss,
            noise_var,
        });
    };
    let ks = ast.cross_cov(ROOT, &train.xs, probe)?;
    let mean = ks.tr_mul(&fitted.alpha);
    let v = fitted.factor.solve_lower(&ks);
    let cov = kss - v.tr_mul(&v);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GpPosterior {
        at: probe.to_vec(),
        mean,
        cov,
        noise_var,
    })
}

/// Lower factor `L` with `L Lᵀ ≈ cov`. Coordinates with exactly zero
/// variance are deterministic and get zero rows.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, GpError> {
    let n = cov.nrows();
    let live: Vec<usize> = (0..n).filter(|&i| cov[(i, i)] != 0.0).collect();
    let mut l = DMatrix::zeros(n, n);
    if live.is_empty() {
        return Ok(l);
    }
    let sub = DMatrix::from_fn(live.len(), live.len(), |i, j| cov[(live[i], live[j])]);
    let sub_l = Factor::new(sub)?.l();
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            l[(i, j)] = sub_l[(a, b)];
        }
    }
    Ok(l)
}

/// I.i.d. draws from `N(mean, cov)`.
pub fn sample_predictive<R: Rng + ?Sized>(
    posterior: &GpPosterior,
    rng: &mut R,
    count: usize,
) -> Result<Vec<DVector<f64>>, GpError> {
    let l = psd_factor(&posterior.cov)?;
    let n = posterior.mean.len();
    Ok((0..count)
        .map(|_| {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            &posterior.mean + &l * z
        })
        .collect())
}
