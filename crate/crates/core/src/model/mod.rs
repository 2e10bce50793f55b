//! ViT encoder hosting any attention variant, the MAE autoencoder and the
//! class-token classifier.

mod classifier;
mod mae;
mod vit;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Scaling, Variant};
use crate::params::{init, join, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub use classifier::{classify_forward, layer_prefix_surgery, Classifier};
pub(crate) use classifier::classify_on_tape;
pub use mae::{mae_forward, mae_mask, masked_patch_mse, Mae, MaeConfig, MaeOutput, MaskSplit};
pub(crate) use mae::mae_on_tape;
pub use vit::{encoder_forward, encoder_on_tape, patch_embed, patch_embed_on_tape, patchify, unpatchify, EncoderTrace};

pub(crate) const LN_EPS: f64 = 1e-6;

fn default_channels() -> usize {
    3
}

fn default_dropout() -> f64 {
    0.1
}

/// One transformer stack plus its token embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub mlp_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Scaling>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_dropout")]
    pub mlp_dropout: f64,
    /// Residual-path dropout after attention and after the MLP.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub attention_dropout: f64,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_true")]
    pub with_class_token: bool,
}

fn default_sigma() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    /// Appendix-style encoder at width `d_model`: 6 layers, 8 heads,
    /// MLP `2·d_model`, 32×32 RGB with 4×4 patches.
    pub fn paper(variant: Variant, d_model: usize, n_layers: usize) -> Self {
        Self {
            d_model,
            mlp_dim: 2 * d_model,
            n_layers,
            n_heads: 8,
            variant,
            scaling: None,
            sigma: 1.0,
            mlp_dropout: 0.1,
            dropout: 0.1,
            attention_dropout: 0.0,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            with_class_token: true,
        }
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size.max(1);
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.with_class_token)
    }

    pub fn attention(&self) -> AttentionConfig {
        let mut a = AttentionConfig::new(self.variant, self.d_model, self.n_heads).with_sigma(self.sigma);
        a.scaling = self.scaling;
        if self.variant == Variant::LinearSim {
            a.seq_len = Some(self.seq_len());
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not tiled by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.mlp_dim == 0 || self.channels == 0 {
            return Err(Error::Config("mlp_dim and channels must be positive".into()));
        }
        for (name, p) in [("mlp_dropout", self.mlp_dropout), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.attention_dropout != 0.0 {
            return Err(Error::Config("attention dropout is fixed at 0".into()));
        }
        self.attention().validate()
    }

    /// Embedding, per-block and final-norm tensors, paths relative to the encoder.
    fn embedding_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut v = vec![
            ("patch.w".to_string(), vec![self.patch_dim(), d]),
            ("patch.b".to_string(), vec![d]),
            ("pos".to_string(), vec![self.seq_len(), d]),
        ];
        if self.with_class_token {
            v.push(("cls".to_string(), vec![d]));
        }
        v
    }

    fn block_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (self.d_model, self.mlp_dim);
        let mut v = vec![
            ("ln1.g".to_string(), vec![d]),
            ("ln1.b".to_string(), vec![d]),
            ("ln2.g".to_string(), vec![d]),
            ("ln2.b".to_string(), vec![d]),
            ("mlp.w1".to_string(), vec![d, m]),
            ("mlp.b1".to_string(), vec![m]),
            ("mlp.w2".to_string(), vec![m, d]),
            ("mlp.b2".to_string(), vec![d]),
        ];
        v.extend(self.attention().param_shapes().into_iter().map(|(r, s)| (format!("attn.{r}"), s)));
        v
    }

    fn norm_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![("norm.g".to_string(), vec![self.d_model]), ("norm.b".to_string(), vec![self.d_model])]
    }

    /// Every tensor of a stack with `embed` token embedding: paths relative to the stack.
    fn stack_shapes(&self, embed: bool) -> Vec<(String, Vec<usize>)> {
        let mut v = if embed { self.embedding_shapes() } else { Vec::new() };
        for i in 0..self.n_layers {
            v.extend(self.block_shapes().into_iter().map(|(p, s)| (format!("blocks.{i}.{p}"), s)));
        }
        v.extend(self.norm_shapes());
        v
    }
}

fn numel(shapes: &[(String, Vec<usize>)]) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Fresh tensor for `path` under the model's init scheme.
fn init_tensor<T: Scalar>(path: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let leaf = path.rsplit('.').next().unwrap_or(path);
    let parent = path.rsplit('.').nth(1).unwrap_or("");
    match (parent, leaf) {
        (p, "g") if p.starts_with("ln") || p == "norm" => Tensor::ones(shape.to_vec()),
        (_, "cls" | "pos" | "mask_token") => init::normal(shape, 0.02, rng),
        _ if shape.len() == 1 => Tensor::zeros(shape.to_vec()),
        _ => init::xavier(shape, rng),
    }
}

/// Initializes every `(path, shape)` under `prefix`; attention blocks use
/// their own scheme.
fn init_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    embed: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    for (path, shape) in cfg.stack_shapes(embed) {
        if path.contains(".attn.") {
            continue;
        }
        store.insert(join(prefix, &path), init_tensor(&path, &shape, rng));
    }
    for i in 0..cfg.n_layers {
        let attn = crate::attention::AttentionParams::<T>::init(cfg.attention(), rng)?;
        store.merge_prefixed(&join(prefix, &format!("blocks.{i}.attn")), attn.store);
    }
    Ok(())
}

/// Parameter counts of a classifier built on `config`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    /// Patch projection, class token and positional table.
    pub embedding: usize,
    /// One transformer block: attention, MLP and two layer norms.
    pub per_block: usize,
    pub attention_per_block: usize,
    pub n_layers: usize,
    /// Final norm plus the linear classifier.
    pub head: usize,
    pub total: usize,
}

pub fn count_model_params(config: &EncoderConfig, n_classes: usize) -> ParamBreakdown {
    let embedding = numel(&config.embedding_shapes());
    let per_block = numel(&config.block_shapes());
    let head = numel(&config.norm_shapes()) + config.d_model * n_classes + n_classes;
    ParamBreakdown {
        embedding,
        per_block,
        attention_per_block: crate::attention::count_params(&config.attention()),
        n_layers: config.n_layers,
        head,
        total: embedding + config.n_layers * per_block + head,
    }
}

/// The five classifier configurations compared in the experiments, with
/// their reported parameter totals.
pub fn paper_models() -> Vec<(&'static str, EncoderConfig, f64)> {
    vec![
        ("Standard", EncoderConfig::paper(Variant::Standard, 256, 6), 3.20e6),
        ("Param-Fusion", EncoderConfig::paper(Variant::Pseudo, 256, 6), 2.45e6),
        ("Semi-Fusion", EncoderConfig::paper(Variant::Semi, 256, 6), 2.50e6),
        ("Linear-Sim", EncoderConfig::paper(Variant::LinearSim, 256, 6), 5.60e6),
        ("Gaussian", EncoderConfig::paper(Variant::Gaussian, 64, 6), 256e3),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_shapes() {
        let c = EncoderConfig::paper(Variant::Pseudo, 256, 6);
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.seq_len(), 65);
        assert_eq!(c.patch_dim(), 48);
        c.validate().unwrap();
        let bad = EncoderConfig { patch_size: 5, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { attention_dropout: 0.1, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn breakdown_is_additive() {
        for (_, cfg, _) in paper_models() {
            let b = count_model_params(&cfg, 10);
            assert_eq!(b.total, b.embedding + b.n_layers * b.per_block + b.head);
        }
    }
}
