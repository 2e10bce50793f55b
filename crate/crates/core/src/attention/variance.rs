use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::Serialize;

use crate::kernels::stats::{layer_normalized, moments, MIN_TRIALS};
use crate::kernels::{kernel_stats_with_dim, KernelSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VarianceReport {
    pub empirical_var: f64,
    pub predicted_var: f64,
    /// `empirical / predicted`; 1 when both vanish.
    pub ratio: f64,
    pub mu_k: f64,
    pub var_k: f64,
    pub trials: usize,
}

/// Monte-Carlo check of `Var(a) = D_head²(σ_k² + μ_k²)σ_w²` for
/// `a = Σ_{d1,d2} k(x[d1], y[d2])·w[d1,d2]` with `x, y` independent
/// layer-normalized vectors of length `d_head` and `w ~ N(0, σ_w²)`.
pub fn variance_probe(
    spec: &KernelSpec,
    d_head: usize,
    sigma_w: f64,
    trials: usize,
    seed: u64,
) -> Result<VarianceReport> {
    spec.validate()?;
    if trials < MIN_TRIALS {
        return Err(Error::invalid(format!("variance_probe needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    if !(sigma_w >= 0.0 && sigma_w.is_finite()) {
        return Err(Error::invalid(format!("sigma_w must be finite and >= 0, got {sigma_w}")));
    }
    let ks = kernel_stats_with_dim(spec, d_head, trials, seed.wrapping_add(0x9e37_79b9))?;
    let predicted_var = (d_head * d_head) as f64 * (ks.var + ks.mean * ks.mean) * sigma_w * sigma_w;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_w).map_err(|e| Error::invalid(e.to_string()))?;
    let samples: Vec<f64> = (0..trials)
        .map(|_| {
            let x = layer_normalized(&mut rng, d_head);
            let y = layer_normalized(&mut rng, d_head);
            let mut a = 0.0;
            for &xi in &x {
                for &yj in &y {
                    a += spec.eval(xi, yj) * rng.sample(normal);
                }
            }
            a
        })
        .collect();
    let empirical_var = moments(&samples).var;
    let ratio = if predicted_var == 0.0 && empirical_var == 0.0 { 1.0 } else { empirical_var / predicted_var };
    Ok(VarianceReport { empirical_var, predicted_var, ratio, mu_k: ks.mean, var_k: ks.var, trials })
}
