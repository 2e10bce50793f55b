use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vit::{layer_norm_on_tape, patch_embed_on_tape};
use super::{encoder_on_tape, init_stack, EncoderConfig, EncoderTrace};
use crate::autograd::{Tape, Var};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Encoder plus a linear head on the final class-token representation.
#[derive(Debug, Clone)]
pub struct Classifier<T: Scalar> {
    pub config: EncoderConfig,
    pub n_classes: usize,
    /// `encoder.*`, `head.w: (D, classes)`, `head.b: (classes)`.
    pub params: ParamStore<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn init(config: EncoderConfig, n_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if !config.with_class_token {
            return Err(Error::Config("the classifier reads the class token; enable with_class_token".into()));
        }
        let mut params = ParamStore::new();
        init_stack(&mut params, "encoder", &config, true, rng)?;
        params.insert("head.w", init::xavier(&[config.d_model, n_classes], rng));
        params.insert("head.b", Tensor::zeros([n_classes]));
        Ok(Self { config, n_classes, params })
    }

    /// Fresh classifier whose encoder tensors are taken from `pretrained`
    /// (already cut to `config.n_layers` blocks); the head stays fresh.
    pub fn from_encoder(
        config: EncoderConfig,
        n_classes: usize,
        pretrained: &ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut clf = Self::init(config, n_classes, rng)?;
        let fresh: Vec<String> = clf.params.paths().filter(|p| p.starts_with("encoder.")).map(String::from).collect();
        for path in fresh {
            let src = pretrained.get(&path)?;
            let dst = clf.params.get_mut(&path)?;
            if src.shape() != dst.shape() {
                return Err(Error::shape(format!(
                    "pretrained `{path}` has shape {:?}, classifier expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(clf)
    }
}

/// Keeps the encoder's token embedding, final norm and its first `keep`
/// blocks; decoder tensors and later blocks are dropped.
pub fn layer_prefix_surgery<T: Scalar>(pretrained: &ParamStore<T>, keep: usize) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    let mut seen = vec![false; keep];
    for (path, t) in pretrained.iter() {
        let Some(rest) = path.strip_prefix("encoder.") else { continue };
        if let Some(blk) = rest.strip_prefix("blocks.") {
            let idx: usize = blk
                .split('.')
                .next()
                .and_then(|i| i.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("malformed block path `{path}`")))?;
            if idx >= keep {
                continue;
            }
            seen[idx] = true;
        }
        out.insert(path, t.clone());
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!("pretrained encoder has no block {missing}; cannot keep {keep}")));
    }
    Ok(out)
}

pub(crate) fn classify_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    params: &Bound,
    images: &Tensor<T>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, EncoderTrace)> {
    if !cfg.with_class_token {
        return Err(Error::Config("classification needs a class token".into()));
    }
    let b = images.dim(0);
    let x = patch_embed_on_tape(tape, cfg, params, "encoder", images)?;
    let trace = encoder_on_tape(tape, cfg, params, "encoder", x, rng)?;
    let h = layer_norm_on_tape(tape, params, "encoder.norm", trace.out)?;
    let cls = tape.gather_rows(h, vec![vec![0]; b])?;
    let cls = tape.reshape(cls, &[b, cfg.d_model])?;
    let logits = tape.matmul(cls, params.get("head.w")?)?;
    let logits = tape.add_broadcast(logits, params.get("head.b")?)?;
    Ok((logits, trace))
}

/// Logits `(B, classes)` in evaluation mode.
pub fn classify_forward<T: Scalar>(clf: &Classifier<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = clf.params.bind(&mut tape, false);
    let (logits, _) = classify_on_tape(&mut tape, &clf.config, &bound, images, None)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::model::count_model_params;
    use rand::SeedableRng;

    fn small(variant: Variant) -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            mlp_dim: 16,
            n_layers: 3,
            n_heads: 2,
            patch_size: 4,
            image_size: 8,
            ..EncoderConfig::paper(variant, 8, 3)
        }
    }

    #[test]
    fn instantiated_count_matches_breakdown() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in Variant::ALL {
            let clf = Classifier::<f32>::init(small(v), 10, &mut rng).unwrap();
            assert_eq!(clf.params.numel(), count_model_params(&clf.config, 10).total, "{v}");
        }
    }

    #[test]
    fn surgery_keeps_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = Classifier::<f32>::init(small(Variant::Pseudo), 10, &mut rng).unwrap();
        let cut = layer_prefix_surgery(&clf.params, 2).unwrap();
        assert!(cut.contains("encoder.blocks.1.attn.u"));
        assert!(!cut.contains("encoder.blocks.2.attn.u"));
        assert!(!cut.contains("head.w"));
        assert!(layer_prefix_surgery(&clf.params, 4).is_err());
        let two = EncoderConfig { n_layers: 2, ..small(Variant::Pseudo) };
        let fine = Classifier::from_encoder(two, 10, &cut, &mut rng).unwrap();
        assert_eq!(fine.params.get("encoder.blocks.0.attn.a").unwrap(), clf.params.get("encoder.blocks.0.attn.a").unwrap());
    }

    #[test]
    fn missing_class_token_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EncoderConfig { with_class_token: false, ..small(Variant::Standard) };
        assert!(Classifier::<f32>::init(cfg, 10, &mut rng).is_err());
    }
}
