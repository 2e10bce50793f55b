use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vit::{class_token_on_tape, layer_norm_on_tape, patch_tokens_on_tape, patchify, unpatchify};
use super::{encoder_on_tape, init_stack, init_tensor, EncoderConfig};
use crate::attention::Variant;
use crate::autograd::{Tape, Var};
use crate::params::{join, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

fn default_mask_ratio() -> f64 {
    0.75
}

/// Encoder, narrower decoder, and masking ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeConfig {
    pub encoder: EncoderConfig,
    /// Token-embedding fields are ignored; image geometry follows the encoder.
    pub decoder: EncoderConfig,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
}

impl MaeConfig {
    /// 8-layer width-256 encoder, 6-layer width-192 decoder, 8 heads, ratio 0.75.
    pub fn paper(variant: Variant) -> Self {
        let encoder = EncoderConfig::paper(variant, 256, 8);
        let decoder = EncoderConfig { d_model: 192, mlp_dim: 384, n_layers: 6, ..encoder.clone() };
        Self { encoder, decoder, mask_ratio: 0.75 }
    }

    /// Width 16, two encoder and two decoder layers, 8×8 images in 2×2 patches.
    pub fn tiny(variant: Variant) -> Self {
        let encoder = EncoderConfig {
            d_model: 16,
            mlp_dim: 32,
            n_layers: 2,
            n_heads: 2,
            patch_size: 2,
            image_size: 8,
            ..EncoderConfig::paper(variant, 16, 2)
        };
        Self { decoder: encoder.clone(), encoder, mask_ratio: 0.75 }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let dec = self.decoder_geometry();
        dec.validate()?;
        if self.encoder.variant == Variant::LinearSim || self.decoder.variant == Variant::LinearSim {
            return Err(Error::Config("linear_sim needs a fixed sequence length and cannot see masked inputs".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        mask_count(self.encoder.num_patches(), self.mask_ratio)?;
        Ok(())
    }

    /// Decoder config with the encoder's image geometry.
    pub fn decoder_geometry(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.encoder.patch_size,
            image_size: self.encoder.image_size,
            channels: self.encoder.channels,
            with_class_token: self.encoder.with_class_token,
            ..self.decoder.clone()
        }
    }

    fn decoder_head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let dec = self.decoder_geometry();
        let dd = dec.d_model;
        vec![
            ("embed.w".into(), vec![self.encoder.d_model, dd]),
            ("embed.b".into(), vec![dd]),
            ("mask_token".into(), vec![dd]),
            ("pos".into(), vec![dec.seq_len(), dd]),
            ("pred.w".into(), vec![dd, dec.patch_dim()]),
            ("pred.b".into(), vec![dec.patch_dim()]),
        ]
    }
}

/// Masked-autoencoder parameters: `encoder.*` and `decoder.*`.
#[derive(Debug, Clone)]
pub struct Mae<T: Scalar> {
    pub config: MaeConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Mae<T> {
    pub fn init(config: MaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_stack(&mut params, "encoder", &config.encoder, true, rng)?;
        init_stack(&mut params, "decoder", &config.decoder_geometry(), false, rng)?;
        for (path, shape) in config.decoder_head_shapes() {
            params.insert(join("decoder", &path), init_tensor(&path, &shape, rng));
        }
        Ok(Self { config, params })
    }
}

/// Sorted visible and masked patch indices of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

fn mask_count(s: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let m = (ratio * s as f64).round() as usize;
    if m == 0 || m >= s {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} over {s} patches masks {m}; need at least one masked and one visible"
        )));
    }
    Ok(m)
}

/// Uniform random split of `0..s` into `round(ratio·s)` masked and the rest visible.
/// Patch indices only; the class token is never part of the split.
pub fn mae_mask(s: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSplit> {
    let m = mask_count(s, ratio)?;
    let mut perm: Vec<usize> = (0..s).collect();
    perm.shuffle(rng);
    let mut masked = perm[..m].to_vec();
    let mut visible = perm[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskSplit { visible, masked })
}

/// Handles from one MAE pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MaeTrace {
    /// Predicted patches for every position, `(B, S_patches, C·p·p)`.
    pub pred: Var,
    pub loss: Var,
}

pub(crate) fn mae_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &MaeConfig,
    params: &Bound,
    images: &Tensor<T>,
    masks: &[MaskSplit],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<MaeTrace> {
    let enc = &cfg.encoder;
    let dec = cfg.decoder_geometry();
    let b = images.dim(0);
    let s = enc.num_patches();
    if masks.len() != b {
        return Err(Error::shape(format!("{} masks for a batch of {b}", masks.len())));
    }
    let v = masks[0].visible.len();

    let tokens = patch_tokens_on_tape(tape, enc, params, "encoder", images)?;
    let visible = tape.gather_rows(tokens, masks.iter().map(|m| m.visible.clone()).collect())?;
    let x = if enc.with_class_token {
        let cls = class_token_on_tape(tape, enc, params, "encoder", b)?;
        tape.concat(&[cls, visible], 1)?
    } else {
        visible
    };
    let h = encoder_on_tape(tape, enc, params, "encoder", x, rng.as_deref_mut())?.out;
    let h = layer_norm_on_tape(tape, params, "encoder.norm", h)?;

    let y = tape.matmul(h, params.get("decoder.embed.w")?)?;
    let y = tape.add_broadcast(y, params.get("decoder.embed.b")?)?;
    let offset = usize::from(enc.with_class_token);
    let y_vis = if offset == 1 { tape.gather_rows(y, vec![(1..=v).collect(); b])? } else { y };
    let mask_tokens = tape.tile(params.get("decoder.mask_token")?, &[b, s - v])?;
    let stacked = tape.concat(&[y_vis, mask_tokens], 1)?;
    // position p sits at stacked[inv[p]]: visible entries first, then mask tokens
    let inverse: Vec<Vec<usize>> = masks
        .iter()
        .map(|m| {
            let mut inv = vec![0; s];
            for (j, &p) in m.visible.iter().enumerate() {
                inv[p] = j;
            }
            for (k, &p) in m.masked.iter().enumerate() {
                inv[p] = v + k;
            }
            inv
        })
        .collect();
    let mut seq = tape.gather_rows(stacked, inverse)?;
    if offset == 1 {
        let cls = tape.gather_rows(y, vec![vec![0]; b])?;
        seq = tape.concat(&[cls, seq], 1)?;
    }
    let seq = tape.add_broadcast(seq, params.get("decoder.pos")?)?;
    let z = encoder_on_tape(tape, &dec, params, "decoder", seq, rng)?.out;
    let z = layer_norm_on_tape(tape, params, "decoder.norm", z)?;
    let out = tape.matmul(z, params.get("decoder.pred.w")?)?;
    let out = tape.add_broadcast(out, params.get("decoder.pred.b")?)?;
    let pred = if offset == 1 { tape.gather_rows(out, vec![(1..=s).collect(); b])? } else { out };

    let target = patchify(images, enc.patch_size)?;
    let masked_target = gather_patches(&target, masks)?;
    let masked_pred = tape.gather_rows(pred, masks.iter().map(|m| m.masked.clone()).collect())?;
    let loss = tape.mse(masked_pred, masked_target)?;
    Ok(MaeTrace { pred, loss })
}

fn gather_patches<T: Scalar>(patches: &Tensor<T>, masks: &[MaskSplit]) -> Result<Tensor<T>> {
    let [b, s, pd] = *patches.shape() else {
        return Err(Error::shape("patches must be (B, S, P)"));
    };
    let m = masks.first().map_or(0, |x| x.masked.len());
    let mut out = Vec::with_capacity(b * m * pd);
    for (bi, mask) in masks.iter().enumerate() {
        for &p in &mask.masked {
            out.extend_from_slice(&patches.data()[(bi * s + p) * pd..(bi * s + p + 1) * pd]);
        }
    }
    Tensor::new([b, m, pd], out)
}

/// Mean squared error between `pred` and `target` patches over masked positions only.
pub fn masked_patch_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, masks: &[MaskSplit]) -> Result<T> {
    let d = gather_patches(pred, masks)?.sub(&gather_patches(target, masks)?)?;
    Ok(d.data().iter().map(|&v| v * v).sum::<T>() / T::of(d.numel().max(1) as f64))
}

#[derive(Debug, Clone)]
pub struct MaeOutput<T: Scalar> {
    pub reconstruction: Tensor<T>,
    pub loss: T,
    pub masks: Vec<MaskSplit>,
}

/// Evaluation pass: masks drawn from `seed`, no dropout.
pub fn mae_forward<T: Scalar>(mae: &Mae<T>, images: &Tensor<T>, seed: u64) -> Result<MaeOutput<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = mae.config.encoder.num_patches();
    let masks = (0..images.dim(0))
        .map(|_| mae_mask(s, mae.config.mask_ratio, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let bound = mae.params.bind(&mut tape, false);
    let tr = mae_on_tape(&mut tape, &mae.config, &bound, images, &masks, None)?;
    let enc = &mae.config.encoder;
    Ok(MaeOutput {
        reconstruction: unpatchify(tape.value(tr.pred), enc.patch_size, enc.channels, enc.image_size)?,
        loss: tape.value(tr.loss).item()?,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mae_mask(64, 0.75, &mut rng).unwrap();
        assert_eq!((m.masked.len(), m.visible.len()), (48, 16));
        let mut all: Vec<usize> = m.masked.iter().chain(&m.visible).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert!(mae_mask(64, 0.001, &mut rng).is_err());
        assert!(mae_mask(64, 1.0, &mut rng).is_err());
        assert!(mae_mask(64, 0.0, &mut rng).is_err());
    }

    #[test]
    fn mask_deterministic_under_seed() {
        let a = mae_mask(64, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mae_mask(64, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_forward_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mae = Mae::<f32>::init(MaeConfig::tiny(Variant::Pseudo), &mut rng).unwrap();
        let img = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng);
        let out = mae_forward(&mae, &img, 4).unwrap();
        assert_eq!(out.reconstruction.shape(), img.shape());
        assert!(out.loss > 0.0);
    }

    #[test]
    fn linear_sim_mae_rejected() {
        assert!(MaeConfig::tiny(Variant::LinearSim).validate().is_err());
    }
}
