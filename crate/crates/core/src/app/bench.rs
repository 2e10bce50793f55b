use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{BenchConfig, RunConfig, RunManifest};
use crate::kernels::{kernel_tensor_bytes, KernelTensorPlan};
use crate::superposition::{InnerWeights, OuterWeights, Reference, SuperpositionLayer};
use crate::tensor::Tensor;
use crate::{Error, Precision, Result, Scalar};

pub const BENCH_HEADER: &str = "b,s,d,mode,status,estimate_bytes,budget_bytes,reps,min_ms,median_ms,max_abs_diff";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchStatus {
    Ok,
    Refused,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub b: usize,
    pub s: usize,
    pub d: usize,
    /// `materialized` or `streamed`.
    pub mode: &'static str,
    pub status: BenchStatus,
    /// Peak kernel-tensor bytes: the whole tensor, or one tile.
    pub estimate_bytes: u128,
    pub budget_bytes: u128,
    pub samples_ms: Vec<f64>,
    pub min_ms: Option<f64>,
    pub median_ms: Option<f64>,
    /// Streamed rows: largest gap to the materialized result, when both ran.
    pub max_abs_diff: Option<f64>,
}

impl BenchRow {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.b,
            self.s,
            self.d,
            self.mode,
            match self.status {
                BenchStatus::Ok => "ok",
                BenchStatus::Refused => "refused",
            },
            self.estimate_bytes,
            self.budget_bytes,
            self.samples_ms.len(),
            opt(self.min_ms),
            opt(self.median_ms),
            opt(self.max_abs_diff)
        )
    }
}

/// Times materialized and streamed `inner_apply` over the grid and writes
/// `out/bench.csv`.
pub fn bench(cfg: &RunConfig, config_path: Option<&Path>) -> Result<Vec<BenchRow>> {
    let run = RunManifest::begin("bench", config_path, cfg)?;
    let out = match cfg.precision {
        Precision::F32 => bench_grid::<f32>(&cfg.bench, cfg.seed),
        Precision::F64 => bench_grid::<f64>(&cfg.bench, cfg.seed),
    };
    if let Ok(rows) = &out {
        let mut text = String::from(BENCH_HEADER);
        text.push('\n');
        for r in rows {
            let _ = writeln!(text, "{}", r.csv());
        }
        fs::create_dir_all(&cfg.out)?;
        fs::write(cfg.out.join("bench.csv"), text)?;
    }
    run.finish(if out.is_ok() { "ok" } else { "error" })?;
    out
}

fn timing(samples: &[f64]) -> (Option<f64>, Option<f64>) {
    if samples.is_empty() {
        return (None, None);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (Some(s[0]), Some(s[s.len() / 2]))
}

pub fn bench_grid<T: Scalar>(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    if cfg.reps == 0 || cfg.heads == 0 || cfg.block == 0 {
        return Err(Error::Config("bench reps, heads and block must be positive".into()));
    }
    cfg.kernel.validate()?;
    let budget = cfg.budget_bytes as u128;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &[b, s, d] in &cfg.grid {
        let x = Tensor::<T>::uniform([b, s, d], -1.0, 1.0, &mut rng);
        let w = Tensor::<T>::uniform([cfg.heads, s, d, d], -1.0, 1.0, &mut rng);
        let layer = |plan| SuperpositionLayer {
            inner: InnerWeights::Dense(w.clone()),
            outer: OuterWeights::ScaledIdentity(Tensor::ones([1, 1])),
            inner_ref: Reference::SelfReference,
            outer_ref: Reference::SelfReference,
            inner_spec: cfg.kernel.clone(),
            outer_spec: cfg.kernel.clone(),
            plan,
        };
        let materialized = layer(KernelTensorPlan { budget_bytes: budget, ..KernelTensorPlan::default() });
        let streamed = layer(KernelTensorPlan { budget_bytes: budget, ..KernelTensorPlan::streamed(cfg.block, cfg.block) });

        let mut full: Option<Tensor<T>> = None;
        let mut samples = Vec::new();
        let mut status = BenchStatus::Ok;
        for _ in 0..cfg.reps {
            let t = Instant::now();
            match materialized.inner_apply(&x) {
                Ok(psi) => full = Some(psi),
                Err(Error::BudgetExceeded { .. }) => {
                    status = BenchStatus::Refused;
                    break;
                }
                Err(e) => return Err(e),
            }
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let (min_ms, median_ms) = timing(&samples);
        rows.push(BenchRow {
            b,
            s,
            d,
            mode: "materialized",
            status,
            estimate_bytes: kernel_tensor_bytes::<T>(b, s, s, d),
            budget_bytes: budget,
            samples_ms: samples,
            min_ms,
            median_ms,
            max_abs_diff: None,
        });

        let mut samples = Vec::new();
        let mut last = None;
        for _ in 0..cfg.reps {
            let t = Instant::now();
            last = Some(streamed.inner_apply(&x)?);
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let diff = match (&full, &last) {
            (Some(f), Some(l)) => Some(f.max_abs_diff(l)?.f64()),
            _ => None,
        };
        let (min_ms, median_ms) = timing(&samples);
        let tile = cfg.block.min(s);
        rows.push(BenchRow {
            b,
            s,
            d,
            mode: "streamed",
            status: BenchStatus::Ok,
            estimate_bytes: kernel_tensor_bytes::<T>(b, tile, tile, d),
            budget_bytes: budget,
            samples_ms: samples,
            min_ms,
            median_ms,
            max_abs_diff: diff,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_matches_and_refuses() {
        let cfg = BenchConfig { grid: vec![[1, 4, 3], [2, 6, 4]], reps: 3, budget_bytes: 2000, ..BenchConfig::default() };
        let rows = bench_grid::<f64>(&cfg, 0).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].status, BenchStatus::Ok);
        assert_eq!(rows[0].samples_ms.len(), 3);
        assert!(rows[1].max_abs_diff.unwrap() < 1e-12);
        // 2·6·6·4·4·8 = 9216 bytes > 2000
        assert_eq!(rows[2].status, BenchStatus::Refused);
        assert_eq!(rows[2].estimate_bytes, 9216);
        assert_eq!(rows[3].status, BenchStatus::Ok);
    }
}
