use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{write_json, RunConfig, RunManifest};
use crate::attention::{
    count_params, pseudo_mhsa_forward, pseudo_to_standard_embed, standard_mhsa_forward, variance_probe,
    AttentionConfig, AttentionParams, Variant,
};
use crate::kernels::{bspline_basis, bspline_basis_all, step_difference, uniform_knots, KernelSpec, KernelTensorPlan};
use crate::model::{count_model_params, paper_models};
use crate::superposition::{
    attention_as_superposition, conv_equivalence_check, InnerWeights, OuterWeights, Reference, SuperpositionLayer,
};
use crate::tensor::Tensor;
use crate::{Error, Precision, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Superposition,
    Conv,
    Embed,
    Variance,
    Params,
    Bspline,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Superposition, Suite::Conv, Suite::Embed, Suite::Variance, Suite::Params, Suite::Bspline];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Superposition => "superposition",
            Suite::Conv => "conv",
            Suite::Embed => "embed",
            Suite::Variance => "variance",
            Suite::Params => "params",
            Suite::Bspline => "bspline",
        }
    }

    /// `all` or one suite name.
    pub fn parse_selection(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Ok(vec![s.parse()?])
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown suite `{s}`; expected one of superposition, conv, embed, variance, params, bspline, all"
            ))
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Acceptance rule of one check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Threshold {
    AtMost { max: f64 },
    Within { lo: f64, hi: f64 },
    Equals { value: f64 },
    /// Recorded for reference only.
    Reported,
}

impl Threshold {
    fn admits(self, v: f64) -> bool {
        match self {
            Threshold::AtMost { max } => v <= max,
            Threshold::Within { lo, hi } => (lo..=hi).contains(&v),
            Threshold::Equals { value } => v == value,
            Threshold::Reported => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub threshold: Threshold,
    pub pass: bool,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, measured: f64, threshold: Threshold) -> Self {
        Self { suite, name: name.into(), measured, threshold, pass: threshold.admits(measured) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub precision: Precision,
    pub seed: u64,
    pub suites: Vec<Suite>,
    pub checks: Vec<Check>,
    pub failures: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs `verify.suite` and writes `out/verify_report.json`. The report's
/// `failures` count is zero iff every enforced check passed.
pub fn verify(cfg: &RunConfig, config_path: Option<&Path>) -> Result<VerifyReport> {
    let suites = Suite::parse_selection(&cfg.verify.suite)?;
    let run = RunManifest::begin("verify", config_path, cfg)?;
    let report = run_suites(&suites, cfg.precision, cfg.seed)?;
    write_json(&cfg.out.join("verify_report.json"), &report)?;
    run.finish(if report.passed() { "ok" } else { "failed" })?;
    Ok(report)
}

/// Runs the suites without touching the filesystem.
pub fn run_suites(suites: &[Suite], precision: Precision, seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    for &suite in suites {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(suite as u64);
        checks.extend(match (suite, precision) {
            (Suite::Superposition, Precision::F32) => superposition_suite::<f32>(&mut rng)?,
            (Suite::Superposition, Precision::F64) => superposition_suite::<f64>(&mut rng)?,
            (Suite::Conv, Precision::F32) => conv_suite::<f32>(&mut rng)?,
            (Suite::Conv, Precision::F64) => conv_suite::<f64>(&mut rng)?,
            (Suite::Embed, Precision::F32) => embed_suite::<f32>(&mut rng)?,
            (Suite::Embed, Precision::F64) => embed_suite::<f64>(&mut rng)?,
            (Suite::Variance, _) => variance_suite(seed)?,
            (Suite::Params, _) => params_suite(),
            (Suite::Bspline, _) => bspline_suite(&mut rng)?,
        });
    }
    let failures = checks.iter().filter(|c| !c.pass).count();
    Ok(VerifyReport { precision, seed, suites: suites.to_vec(), checks, failures })
}

fn tol<T: Scalar>(f64_tol: f64, f32_tol: f64) -> Threshold {
    Threshold::AtMost { max: if T::BYTES == 8 { f64_tol } else { f32_tol } }
}

fn superposition_suite<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (s, d, e) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let x = Tensor::<T>::uniform([s, d], -1.0, 1.0, rng);
        let wq = Tensor::uniform([d, e], -1.0, 1.0, rng);
        let wk = Tensor::uniform([d, e], -1.0, 1.0, rng);
        let wv = Tensor::uniform([d, e], -1.0, 1.0, rng);
        worst = worst.max(attention_as_superposition(&x, &wq, &wk, &wv)?.max_abs_diff);
    }
    let mut stream_gap = 0.0f64;
    for spec in [KernelSpec::Linear, KernelSpec::Gaussian { sigma: 1.0 }] {
        let x = Tensor::<T>::uniform([2, 7, 4], -1.0, 1.0, rng);
        let w = Tensor::uniform([3, 7, 4, 4], -1.0, 1.0, rng);
        let layer = |plan| SuperpositionLayer {
            inner: InnerWeights::Dense(w.clone()),
            outer: OuterWeights::ScaledIdentity(Tensor::ones([1, 1])),
            inner_ref: Reference::SelfReference,
            outer_ref: Reference::SelfReference,
            inner_spec: spec.clone(),
            outer_spec: KernelSpec::Linear,
            plan,
        };
        let full = layer(KernelTensorPlan::default()).inner_apply(&x)?;
        let streamed = layer(KernelTensorPlan::streamed(3, 2)).inner_apply(&x)?;
        stream_gap = stream_gap.max(full.max_abs_diff(&streamed)?.f64());
    }
    Ok(vec![
        Check::new(Suite::Superposition, "attention_vs_superposition_max_abs_diff", worst, tol::<T>(1e-9, 1e-4)),
        Check::new(Suite::Superposition, "streamed_vs_materialized_max_abs_diff", stream_gap, tol::<T>(1e-12, 1e-5)),
    ])
}

fn conv_suite<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, s, d) = (rng.random_range(1..=2), rng.random_range(1..=6), rng.random_range(1..=6));
        let x = Tensor::<T>::uniform([b, s, d], -1.0, 1.0, rng);
        let w = Tensor::uniform([d, d], -1.0, 1.0, rng);
        worst = worst.max(conv_equivalence_check(&x, &w, &KernelTensorPlan::default())?.max_abs_diff);
    }
    Ok(vec![Check::new(Suite::Conv, "conv_vs_contraction_max_abs_diff", worst, tol::<T>(1e-9, 1e-5))])
}

/// Pseudo block with every tensor drawn at random, biases included.
pub(crate) fn random_pseudo<T: Scalar>(d: usize, n: usize, rng: &mut impl Rng) -> Result<AttentionParams<T>> {
    let cfg = AttentionConfig::new(Variant::Pseudo, d, n);
    let mut p = AttentionParams::<T>::zeros(cfg.clone())?;
    for (role, shape) in cfg.param_shapes() {
        p.set(role, Tensor::randn(shape, 0.5, rng))?;
    }
    Ok(p)
}

fn embed_suite<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pseudo = random_pseudo::<T>(16, 4, rng)?;
        let standard = pseudo_to_standard_embed(&pseudo)?;
        let x = Tensor::<T>::randn([2, 8, 16], 1.0, rng);
        let a = pseudo_mhsa_forward(&pseudo, &x)?;
        let b = standard_mhsa_forward(&standard, &x)?;
        worst = worst.max(a.max_abs_diff(&b)?.f64());
    }
    Ok(vec![Check::new(Suite::Embed, "pseudo_vs_embedded_standard_max_abs_diff", worst, tol::<T>(1e-10, 1e-5))])
}

fn variance_suite(seed: u64) -> Result<Vec<Check>> {
    let lin = variance_probe(&KernelSpec::Linear, 8, 0.5, 100_000, seed)?;
    let gau = variance_probe(&KernelSpec::Gaussian { sigma: 1.0 }, 8, 0.5, 100_000, seed ^ 1)?;
    Ok(vec![
        Check::new(Suite::Variance, "linear_kernel_ratio", lin.ratio, Threshold::Within { lo: 0.8, hi: 1.25 }),
        Check::new(Suite::Variance, "gaussian_kernel_ratio", gau.ratio, Threshold::Within { lo: 0.7, hi: 1.4 }),
    ])
}

fn params_suite() -> Vec<Check> {
    let block = |v| count_params(&AttentionConfig::new(v, 256, 8)) as f64;
    let (std, pseudo, semi) = (block(Variant::Standard), block(Variant::Pseudo), block(Variant::Semi));
    let mut checks = vec![
        Check::new(Suite::Params, "standard_block", std, Threshold::Equals { value: 263_168.0 }),
        Check::new(Suite::Params, "pseudo_block", pseudo, Threshold::Equals { value: 139_776.0 }),
        Check::new(Suite::Params, "semi_block", semi, Threshold::Equals { value: 147_968.0 }),
        Check::new(Suite::Params, "pseudo_to_standard_ratio", pseudo / std, Threshold::Within { lo: 0.530, hi: 0.532 }),
        Check::new(Suite::Params, "semi_minus_pseudo_over_6_layers", 6.0 * (semi - pseudo), Threshold::Equals {
            value: 49_152.0,
        }),
    ];
    for (name, cfg, reported) in paper_models() {
        let total = count_model_params(&cfg, 10).total as f64;
        let rel = total / reported;
        let threshold = match cfg.variant {
            Variant::Gaussian | Variant::LinearSim => Threshold::Reported,
            _ => Threshold::Within { lo: 0.97, hi: 1.03 },
        };
        checks.push(Check::new(Suite::Params, format!("{name}_total_over_reported"), rel, threshold));
    }
    checks
}

fn bspline_suite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut dev = 0.0f64;
    for degree in 0..=4 {
        let knots = uniform_knots(-2.0, 2.0, 12);
        let (lo, hi) = (knots[degree], knots[knots.len() - 1 - degree]);
        for _ in 0..400 {
            let x = rng.random_range(lo..hi);
            let sum: f64 = bspline_basis_all(&knots, degree, x)?.iter().sum();
            dev = dev.max((sum - 1.0).abs());
        }
    }
    let knots = uniform_knots(0.0, 1.0, 8);
    let mut step_gap = 0.0f64;
    for i in 0..knots.len() - 1 {
        let probes = (0..50).map(|_| rng.random_range(-0.2..1.2)).chain(knots.iter().copied());
        for x in probes {
            step_gap = step_gap.max((bspline_basis(&knots, 0, i, x)? - step_difference(&knots, i, x)?).abs());
        }
    }
    Ok(vec![
        Check::new(Suite::Bspline, "partition_of_unity_max_deviation", dev, Threshold::AtMost { max: 1e-12 }),
        Check::new(Suite::Bspline, "degree0_step_difference_max_gap", step_gap, Threshold::Equals { value: 0.0 }),
    ])
}
