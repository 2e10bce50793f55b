use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::KernelSpec;
use crate::{Error, Result};

/// Monte-Carlo moments of `k(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub mean: f64,
    pub var: f64,
    pub mean_stderr: f64,
    pub var_stderr: f64,
    pub trials: usize,
}

pub(crate) const MIN_TRIALS: usize = 10_000;
const DEFAULT_DIM: usize = 32;

/// Draws a standard normal vector of length `dim` and layer-normalizes it
/// (zero mean, unit population variance).
pub(crate) fn layer_normalized(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mean = v.iter().sum::<f64>() / dim as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / dim as f64;
    let rstd = 1.0 / (var + 1e-12).sqrt();
    v.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
    v
}

/// Mean and variance of `k(x, y)` where `x` and `y` are single coordinates
/// of two independent layer-normalized random vectors of length 32.
pub fn kernel_stats(spec: &KernelSpec, trials: usize, seed: u64) -> Result<KernelStats> {
    kernel_stats_with_dim(spec, DEFAULT_DIM, trials, seed)
}

/// [`kernel_stats`] with the token width chosen explicitly.
pub fn kernel_stats_with_dim(spec: &KernelSpec, dim: usize, trials: usize, seed: u64) -> Result<KernelStats> {
    spec.validate()?;
    if trials < MIN_TRIALS {
        return Err(Error::invalid(format!("kernel_stats needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    if dim < 2 {
        return Err(Error::invalid("layer-normalized vectors need dim >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x = layer_normalized(&mut rng, dim);
        let y = layer_normalized(&mut rng, dim);
        let (i, j) = (rng.random_range(0..dim), rng.random_range(0..dim));
        samples.push(spec.eval(x[i], y[j]));
    }
    Ok(moments(&samples))
}

pub(crate) fn moments(samples: &[f64]) -> KernelStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = samples.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    KernelStats {
        mean,
        var,
        mean_stderr: (var / n).sqrt(),
        var_stderr: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        trials: samples.len(),
    }
}
