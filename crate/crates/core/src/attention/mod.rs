//! Multi-head attention blocks: standard, Pseudo (fused `U, A, P`),
//! Semi-Fusion, Gaussian-kernel and Linear-Sim, plus the low-rank
//! factorization that links them and the score-variance probe.

mod lowrank;
mod variance;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::kernels::KernelSpec;
use crate::params::{init, join, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub use lowrank::{low_rank_factorize, LowRank};
pub use variance::{variance_probe, VarianceReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    Pseudo,
    Semi,
    Gaussian,
    LinearSim,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Standard, Variant::Pseudo, Variant::Semi, Variant::Gaussian, Variant::LinearSim];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Pseudo => "pseudo",
            Variant::Semi => "semi",
            Variant::Gaussian => "gaussian",
            Variant::LinearSim => "linear_sim",
        }
    }

    pub fn default_scaling(self) -> Scaling {
        match self {
            Variant::Standard => Scaling::InvSqrtDhead,
            _ => Scaling::InvDhead,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attention variant `{s}`")))
    }
}

/// Temperature applied to the scores before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    InvDhead,
    InvSqrtDhead,
}

fn default_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub variant: Variant,
    /// `None` picks the variant's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Scaling>,
    /// Gaussian kernel width.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Fixed sequence length, required by Linear-Sim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
}

impl AttentionConfig {
    pub fn new(variant: Variant, d_model: usize, n_heads: usize) -> Self {
        Self { d_model, n_heads, variant, scaling: None, sigma: 1.0, seq_len: None }
    }

    pub fn with_seq_len(mut self, s: usize) -> Self {
        self.seq_len = Some(s);
        self
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = Some(scaling);
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling.unwrap_or(self.variant.default_scaling())
    }

    pub fn scale(&self) -> f64 {
        let dh = self.d_head() as f64;
        match self.scaling() {
            Scaling::InvDhead => 1.0 / dh,
            Scaling::InvSqrtDhead => 1.0 / dh.sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.variant == Variant::Gaussian {
            KernelSpec::gaussian(self.sigma)?;
        }
        if self.variant == Variant::LinearSim && self.seq_len.is_none_or(|s| s == 0) {
            return Err(Error::Config("linear_sim attention needs a positive seq_len".into()));
        }
        Ok(())
    }

    /// Parameter roles and shapes for this configuration.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, n, dh) = (self.d_model, self.n_heads, self.d_head());
        match self.variant {
            Variant::Standard => vec![
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("bq", vec![d]),
                ("bk", vec![d]),
                ("bv", vec![d]),
                ("bo", vec![d]),
            ],
            Variant::Pseudo => {
                vec![("u", vec![d, d]), ("a", vec![n, dh, dh]), ("p", vec![d, d]), ("b1", vec![d]), ("b2", vec![d])]
            }
            Variant::Semi => vec![
                ("u", vec![d, d]),
                ("a", vec![n, dh, dh]),
                ("wv", vec![n, dh, dh]),
                ("wo", vec![d, d]),
                ("b1", vec![d]),
                ("b2", vec![d]),
            ],
            Variant::Gaussian => vec![("u", vec![d, d]), ("p", vec![d, d]), ("b1", vec![d]), ("b2", vec![d])],
            Variant::LinearSim => {
                let s = self.seq_len.unwrap_or(0);
                vec![
                    ("u", vec![d, d]),
                    ("w_inner", vec![n, s, s, dh, dh]),
                    ("p", vec![d, d]),
                    ("b1", vec![d]),
                    ("b2", vec![d]),
                ]
            }
        }
    }
}

/// Exact number of trainable scalars, biases included.
pub fn count_params(config: &AttentionConfig) -> usize {
    config.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Weights of one attention block, keyed by role (`u`, `a`, `wq`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Scalar> {
    pub config: AttentionConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Xavier-uniform matrices, zero biases; `a` and `wv` per-head blocks
    /// start near the identity so fresh blocks behave like plain attention.
    pub fn init(config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (role, shape) in config.param_shapes() {
            let t = match role {
                "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => Tensor::zeros(shape),
                "a" | "wv" if shape.len() == 3 => {
                    let noise = init::normal::<T>(&shape, 0.02, rng);
                    Tensor::from_fn(shape, |i| noise.at(i) + if i[1] == i[2] { T::one() } else { T::zero() })
                }
                "w_inner" => init::normal(&shape, 0.02, rng),
                _ => init::xavier(&shape, rng),
            };
            store.insert(role, t);
        }
        Ok(Self { config, store })
    }

    /// All-zero weights of the right shapes.
    pub fn zeros(config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (role, shape) in config.param_shapes() {
            store.insert(role, Tensor::zeros(shape));
        }
        Ok(Self { config, store })
    }

    /// Wraps existing tensors after checking roles and shapes.
    pub fn from_store(config: AttentionConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if store.len() != shapes.len() {
            return Err(Error::shape(format!(
                "{} attention expects {} tensors, got {}",
                config.variant,
                shapes.len(),
                store.len()
            )));
        }
        for (role, shape) in &shapes {
            let t = store.get(role)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("`{role}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self { config, store })
    }

    pub fn get(&self, role: &str) -> Result<&Tensor<T>> {
        self.store.get(role)
    }

    pub fn set(&mut self, role: &str, t: Tensor<T>) -> Result<()> {
        let cur = self.store.get_mut(role)?;
        if cur.shape() != t.shape() {
            return Err(Error::shape(format!("`{role}`: shape {:?}, expected {:?}", t.shape(), cur.shape())));
        }
        *cur = t;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.store.numel()
    }
}

/// Tape handles produced by one attention forward.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub out: Var,
    /// Unscaled scores `(B, n, S, S)`.
    pub scores: Var,
    /// Row-stochastic maps `(B, n, S, S)`.
    pub maps: Var,
}

/// Records the block on `tape`; parameters are looked up in `params` under `prefix`.
pub fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &AttentionConfig,
    params: &Bound,
    prefix: &str,
    x: Var,
) -> Result<AttentionTrace> {
    let [b, s, d] = *tape.shape(x) else {
        return Err(Error::shape(format!("attention input must be (B, S, D), got {:?}", tape.shape(x))));
    };
    if d != config.d_model {
        return Err(Error::shape(format!("attention input width {d}, configured d_model {}", config.d_model)));
    }
    if config.variant == Variant::LinearSim {
        let expected = config.seq_len.unwrap_or(0);
        if s != expected {
            return Err(Error::SeqLenMismatch { expected, got: s });
        }
    }
    let (n, dh) = (config.n_heads, config.d_head());
    let p = |role: &str| params.get(&join(prefix, role));

    let affine = |tape: &mut Tape<T>, x: Var, w: Var, bias: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, bias)
    };
    let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[b, s, n, dh])?;
        tape.permute(v, &[0, 2, 1, 3])
    };

    let (scores, values) = match config.variant {
        Variant::Standard => {
            let q = affine(tape, x, p("wq")?, p("bq")?)?;
            let k = affine(tape, x, p("wk")?, p("bk")?)?;
            let v = affine(tape, x, p("wv")?, p("bv")?)?;
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            (tape.contract(q, k, "bnsd,bnrd->bnsr")?, v)
        }
        Variant::Pseudo | Variant::Semi => {
            let xt = affine(tape, x, p("u")?, p("b1")?)?;
            let xh = split(tape, xt)?;
            let t = tape.contract(xh, p("a")?, "bnsd,nde->bnse")?;
            (tape.contract(t, xh, "bnse,bnre->bnsr")?, xh)
        }
        Variant::Gaussian => {
            let xt = affine(tape, x, p("u")?, p("b1")?)?;
            let xh = split(tape, xt)?;
            (tape.kernel_scores(xh, &KernelSpec::gaussian(config.sigma)?)?, xh)
        }
        Variant::LinearSim => {
            let xt = affine(tape, x, p("u")?, p("b1")?)?;
            let xh = split(tape, xt)?;
            // Σ_{r,d1,d2} x_s[d1] x_r[d2] W[h, r, d1, d2], contracted over (r, d2) first
            let g = tape.contract(xh, p("w_inner")?, "bnrj,nhrij->bnhi")?;
            (tape.contract(xh, g, "bnsi,bnhi->bnsh")?, xh)
        }
    };
    let scaled = tape.scale(scores, config.scale());
    let maps = tape.softmax(scaled)?;
    let mut heads = tape.contract(maps, values, "bnsr,bnrd->bnsd")?;
    if config.variant == Variant::Semi {
        heads = tape.contract(heads, p("wv")?, "bnsd,nde->bnse")?;
    }
    let merged = tape.permute(heads, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[b, s, d])?;
    let out = match config.variant {
        Variant::Standard => affine(tape, merged, p("wo")?, p("bo")?)?,
        Variant::Semi => affine(tape, merged, p("wo")?, p("b2")?)?,
        _ => affine(tape, merged, p("p")?, p("b2")?)?,
    };
    Ok(AttentionTrace { out, scores, maps })
}

/// Values of one attention forward.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Scalar> {
    pub out: Tensor<T>,
    pub scores: Tensor<T>,
    pub maps: Tensor<T>,
}

/// Evaluates the block without recording gradients.
pub fn attention_eval<T: Scalar>(params: &AttentionParams<T>, x: &Tensor<T>) -> Result<AttentionOutput<T>> {
    let mut tape = Tape::new();
    let bound = params.store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let tr = attention_on_tape(&mut tape, &params.config, &bound, "", xv)?;
    Ok(AttentionOutput {
        out: tape.value(tr.out).clone(),
        scores: tape.value(tr.scores).clone(),
        maps: tape.value(tr.maps).clone(),
    })
}

/// Output of the block for whichever variant `params` holds.
pub fn attention_forward<T: Scalar>(params: &AttentionParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(attention_eval(params, x)?.out)
}

fn expect_variant<T: Scalar>(params: &AttentionParams<T>, v: Variant) -> Result<()> {
    if params.config.variant != v {
        return Err(Error::invalid(format!("expected {v} attention parameters, got {}", params.config.variant)));
    }
    Ok(())
}

/// `softmax(Q_i K_iᵀ·scale) V_i` per head, concatenated and projected by `W^O`.
pub fn standard_mhsa_forward<T: Scalar>(params: &AttentionParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_variant(params, Variant::Standard)?;
    attention_forward(params, x)
}

/// `X̃ = XU + b₁`, maps `softmax(X̃_i A_i X̃_iᵀ / D_head)`, heads `map·X̃_i`, output `Head·P + b₂`.
pub fn pseudo_mhsa_forward<T: Scalar>(params: &AttentionParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_variant(params, Variant::Pseudo)?;
    attention_forward(params, x)
}

/// Pseudo with per-head value blocks `W̃^v_i` and an unfused `W^O`.
pub fn semi_fusion_forward<T: Scalar>(params: &AttentionParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_variant(params, Variant::Semi)?;
    attention_forward(params, x)
}

/// Scores `Σ_{d1,d2} exp(-(X̃[s,d1] - X̃[r,d2])² / 2σ²)` per head; `sigma` overrides the config.
pub fn gaussian_mhsa_forward<T: Scalar>(params: &AttentionParams<T>, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    expect_variant(params, Variant::Gaussian)?;
    let mut p = params.clone();
    p.config.sigma = sigma;
    attention_forward(&p, x)
}

/// Simulated maps from a linear-kernel superposition with `H = S`.
pub fn linear_sim_forward<T: Scalar>(params: &AttentionParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_variant(params, Variant::LinearSim)?;
    attention_forward(params, x)
}

/// Standard-attention weights reproducing a Pseudo block exactly:
/// `W^q_i = U_i A_i`, `W^k_i = W^v_i = U_i`, `W^O = P`, `b^q_i = b₁,ᵢ A_i`,
/// `b^k = b^v = b₁`, `b^O = b₂`, with `1/D_head` scaling.
pub fn pseudo_to_standard_embed<T: Scalar>(params: &AttentionParams<T>) -> Result<AttentionParams<T>> {
    expect_variant(params, Variant::Pseudo)?;
    let cfg = &params.config;
    let (d, n, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let (u, a, b1) = (params.get("u")?, params.get("a")?, params.get("b1")?);
    let mut wq = Tensor::zeros([d, d]);
    let mut bq = Tensor::zeros([d]);
    for h in 0..n {
        let ui = u.narrow(1, h * dh, (h + 1) * dh)?;
        let ai = a.narrow(0, h, h + 1)?.into_reshape([dh, dh])?;
        let qi = ui.matmul(&ai)?;
        let bi = b1.narrow(0, h * dh, (h + 1) * dh)?.into_reshape([1, dh])?.matmul(&ai)?;
        for row in 0..d {
            for c in 0..dh {
                wq.set(&[row, h * dh + c], qi.at(&[row, c]));
            }
        }
        for c in 0..dh {
            bq.set(&[h * dh + c], bi.at(&[0, c]));
        }
    }
    let config = AttentionConfig { variant: Variant::Standard, scaling: Some(Scaling::InvDhead), ..cfg.clone() };
    let mut store = ParamStore::new();
    store.insert("wq", wq);
    store.insert("wk", u.clone());
    store.insert("wv", u.clone());
    store.insert("wo", params.get("p")?.clone());
    store.insert("bq", bq);
    store.insert("bk", b1.clone());
    store.insert("bv", b1.clone());
    store.insert("bo", params.get("b2")?.clone());
    AttentionParams::from_store(config, store)
}
