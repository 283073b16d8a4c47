//! Synthetic datasets drawn from known kernels on a uniform grid over [0, 10].

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gp::{noisy_cov, Dataset, Factor, GpError, DEFAULT_NOISE_VAR};
use crate::kernel::KernelAst;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    LinPlusPer,
    Periodic,
    Linear,
    CpDemo,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::LinPlusPer,
        SynthKind::Periodic,
        SynthKind::Linear,
        SynthKind::CpDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::LinPlusPer => "lin_plus_per",
            SynthKind::Periodic => "periodic",
            SynthKind::Linear => "linear",
            SynthKind::CpDemo => "cp_demo",
        }
    }

    /// The kernel the data are drawn from.
    pub fn ground_truth(self) -> KernelAst {
        match self {
            SynthKind::LinPlusPer => {
                KernelAst::sum(KernelAst::linear(5.0), KernelAst::periodic(1.0, 3.0))
            }
            SynthKind::Periodic => KernelAst::periodic(1.4, 3.0),
            SynthKind::Linear => KernelAst::linear(5.0),
            // smooth drift that switches to a fast oscillation at x = 3
            SynthKind::CpDemo => {
                KernelAst::changepoint(3.0, KernelAst::se(2.0), KernelAst::periodic(1.0, 1.1))
            }
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `n` evenly spaced points covering [0, 10].
pub fn grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| 10.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Draws `y ~ N(0, K + 0.1 I)` at `xs`.
pub fn sample_gp<R: Rng + ?Sized>(
    ast: &KernelAst,
    xs: &[f64],
    rng: &mut R,
) -> Result<Dataset, GpError> {
    if xs.is_empty() {
        return Ok(Dataset::default());
    }
    let l = Factor::new(noisy_cov(ast, xs, DEFAULT_NOISE_VAR)?)?.l();
    let z = DVector::from_fn(xs.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = l * z;
    Dataset::new(xs.to_vec(), y.iter().copied().collect())
}

pub fn synth_data<R: Rng + ?Sized>(
    kind: SynthKind,
    n: usize,
    rng: &mut R,
) -> Result<Dataset, GpError> {
    sample_gp(&kind.ground_truth(), &grid(n), rng)
}

/// Two linear and two periodic series, in that order.
pub fn cluster_demo<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<Dataset>, GpError> {
    [
        SynthKind::Linear,
        SynthKind::Linear,
        SynthKind::Periodic,
        SynthKind::Periodic,
    ]
    .into_iter()
    .map(|k| synth_data(k, n, rng))
    .collect()
}
