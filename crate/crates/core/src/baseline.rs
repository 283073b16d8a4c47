//! Bayesian linear regression reference model.
//!
//! `y = w0 + w1·x + ε` with `w | σ² ~ N(0, σ² I)` and `σ² ~ IG(1, 1)`,
//! fitted on internally z-scored inputs and outputs so that the unit prior
//! scale means the same thing on every dataset and predictions transform
//! exactly under affine rescaling of the data.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::gp::{Dataset, GpPosterior};

const PRIOR_SHAPE: f64 = 1.0;
const PRIOR_RATE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("linear regression needs at least one training point")]
    EmptyTrain,
}

/// Mean and population standard deviation, with scale 1 when there is no
/// spread.
fn location_scale(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

fn design(xs: &[f64], loc: f64, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), 2, |i, j| {
        if j == 0 {
            1.0
        } else {
            (xs[i] - loc) / scale
        }
    })
}

/// Posterior predictive at `probe`. `cov` carries the uncertainty of the
/// regression line and `noise_var` the posterior mean noise variance, so
/// `std_noisy` is the exact predictive standard deviation.
pub fn blr_baseline(train: &Dataset, probe: &[f64]) -> Result<GpPosterior, BaselineError> {
    if train.is_empty() {
        return Err(BaselineError::EmptyTrain);
    }
    let (mx, sx) = location_scale(&train.xs);
    let (my, sy) = location_scale(&train.ys);
    let phi = design(&train.xs, mx, sx);
    let v = DVector::from_iterator(train.len(), train.ys.iter().map(|y| (y - my) / sy));
    let precision = phi.tr_mul(&phi) + DMatrix::identity(2, 2);
    let chol =
        Cholesky::new(precision.clone()).expect("identity plus a Gram matrix is positive definite");
    let mean_w = chol.solve(&phi.tr_mul(&v));
    let n = train.len() as f64;
    let shape = PRIOR_SHAPE + n / 2.0;
    let rate = PRIOR_RATE + 0.5 * (v.dot(&v) - mean_w.dot(&(&precision * &mean_w)));
    let noise = rate / (shape - 1.0);
    let phi_s = design(probe, mx, sx);
    let mean = &phi_s * &mean_w;
    let cov = &phi_s * chol.solve(&phi_s.transpose()) * noise;
    Ok(GpPosterior {
        at: probe.to_vec(),
        mean: mean.map(|m| m * sy + my),
        cov: cov * (sy * sy),
        noise_var: noise * sy * sy,
    })
}
