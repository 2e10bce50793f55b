use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, LN_EPS};
use crate::attention::{attention_on_tape, AttentionTrace};
use crate::autograd::{Tape, Var};
use crate::params::{join, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// `(B, C, H, W) -> (B, S, C·p·p)`: non-overlapping `p×p` patches in
/// row-major grid order, each flattened as `(channel, row, col)`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = *images.shape() else {
        return Err(Error::shape(format!("images must be (B, C, H, W), got {:?}", images.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} images are not tiled by {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ci) * h + gy * p + py) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new([b, gh * gw, c * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, p: usize, channels: usize, image_size: usize) -> Result<Tensor<T>> {
    let [b, s, pd] = *patches.shape() else {
        return Err(Error::shape(format!("patches must be (B, S, C·p·p), got {:?}", patches.shape())));
    };
    let g = image_size / p.max(1);
    if p == 0 || g * p != image_size || g * g != s || pd != channels * p * p {
        return Err(Error::shape(format!("patches {:?} do not tile a {image_size}x{image_size} image", patches.shape())));
    }
    let mut out = Tensor::zeros([b, channels, image_size, image_size]);
    let w = image_size;
    let dst = out.data_mut();
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let patch = &patches.data()[((bi * s) + gy * g + gx) * pd..((bi * s) + gy * g + gx + 1) * pd];
                for ci in 0..channels {
                    for py in 0..p {
                        let row = ((bi * channels + ci) * w + gy * p + py) * w + gx * p;
                        dst[row..row + p].copy_from_slice(&patch[(ci * p + py) * p..(ci * p + py + 1) * p]);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_images<T: Scalar>(cfg: &EncoderConfig, images: &Tensor<T>) -> Result<()> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if images.ndim() != 4 || images.shape()[1..] != want {
        return Err(Error::shape(format!("images {:?} do not match configured (B, {want:?})", images.shape())));
    }
    Ok(())
}

/// Rows `rows` of the positional table as an `(len, D)` handle.
fn pos_rows<T: Scalar>(tape: &mut Tape<T>, pos: Var, rows: std::ops::Range<usize>) -> Result<Var> {
    let [s, d] = *tape.shape(pos) else {
        return Err(Error::shape("positional table must be (S, D)"));
    };
    let len = rows.len();
    let p3 = tape.reshape(pos, &[1, s, d])?;
    let picked = tape.gather_rows(p3, vec![rows.collect()])?;
    tape.reshape(picked, &[len, d])
}

/// Patch tokens `(B, S_patches, D)` with their positional rows added.
pub(crate) fn patch_tokens_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    params: &Bound,
    prefix: &str,
    images: &Tensor<T>,
) -> Result<Var> {
    check_images(cfg, images)?;
    let patches = tape.constant(patchify(images, cfg.patch_size)?);
    let w = params.get(&join(prefix, "patch.w"))?;
    let b = params.get(&join(prefix, "patch.b"))?;
    let t = tape.matmul(patches, w)?;
    let t = tape.add_broadcast(t, b)?;
    let offset = usize::from(cfg.with_class_token);
    let pos = pos_rows(tape, params.get(&join(prefix, "pos"))?, offset..offset + cfg.num_patches())?;
    tape.add_broadcast(t, pos)
}

/// Class token plus its positional row, repeated over the batch: `(B, 1, D)`.
pub(crate) fn class_token_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    params: &Bound,
    prefix: &str,
    batch: usize,
) -> Result<Var> {
    if !cfg.with_class_token {
        return Err(Error::Config("model has no class token".into()));
    }
    let cls = params.get(&join(prefix, "cls"))?;
    let pos0 = pos_rows(tape, params.get(&join(prefix, "pos"))?, 0..1)?;
    let pos0 = tape.reshape(pos0, &[cfg.d_model])?;
    let tok = tape.add(cls, pos0)?;
    tape.tile(tok, &[batch, 1])
}

/// Full token sequence `(B, S, D)`: class token first when configured.
pub fn patch_embed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    params: &Bound,
    prefix: &str,
    images: &Tensor<T>,
) -> Result<Var> {
    let tokens = patch_tokens_on_tape(tape, cfg, params, prefix, images)?;
    if !cfg.with_class_token {
        return Ok(tokens);
    }
    let cls = class_token_on_tape(tape, cfg, params, prefix, images.dim(0))?;
    tape.concat(&[cls, tokens], 1)
}

pub(crate) fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng.as_deref_mut() {
        Some(r) if p > 0.0 => tape.dropout(x, p, r),
        _ => Ok(x),
    }
}

pub(crate) fn layer_norm_on_tape<T: Scalar>(tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = params.get(&join(prefix, "g"))?;
    let b = params.get(&join(prefix, "b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn affine<T: Scalar>(tape: &mut Tape<T>, params: &Bound, w: &str, b: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, params.get(w)?)?;
    tape.add_broadcast(y, params.get(b)?)
}

/// Handles from one pass through the blocks.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub out: Var,
    pub attention: Vec<AttentionTrace>,
}

/// Pre-norm blocks `x + Attn(LN(x))`, `x + MLP(LN(x))`. Dropout is active
/// only when `rng` is given. The final norm is not applied.
pub fn encoder_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    params: &Bound,
    prefix: &str,
    x: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderTrace> {
    let [_, _, d] = *tape.shape(x) else {
        return Err(Error::shape(format!("encoder input must be (B, S, D), got {:?}", tape.shape(x))));
    };
    if d != cfg.d_model {
        return Err(Error::shape(format!("encoder input width {d}, configured {}", cfg.d_model)));
    }
    let attn_cfg = cfg.attention();
    let mut x = x;
    let mut traces = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let blk = join(prefix, &format!("blocks.{i}"));
        let h = layer_norm_on_tape(tape, params, &join(&blk, "ln1"), x)?;
        let tr = attention_on_tape(tape, &attn_cfg, params, &join(&blk, "attn"), h)?;
        traces.push(tr);
        let a = dropout(tape, tr.out, cfg.dropout, &mut rng)?;
        x = tape.add(x, a)?;

        let h = layer_norm_on_tape(tape, params, &join(&blk, "ln2"), x)?;
        let h = affine(tape, params, &join(&blk, "mlp.w1"), &join(&blk, "mlp.b1"), h)?;
        let h = tape.gelu(h);
        let h = dropout(tape, h, cfg.mlp_dropout, &mut rng)?;
        let h = affine(tape, params, &join(&blk, "mlp.w2"), &join(&blk, "mlp.b2"), h)?;
        let h = dropout(tape, h, cfg.dropout, &mut rng)?;
        x = tape.add(x, h)?;
    }
    Ok(EncoderTrace { out: x, attention: traces })
}

/// Token embedding of `images` with encoder-relative `params` (`patch.w`, `pos`, ...).
pub fn patch_embed<T: Scalar>(images: &Tensor<T>, cfg: &EncoderConfig, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let v = patch_embed_on_tape(&mut tape, cfg, &bound, "", images)?;
    Ok(tape.value(v).clone())
}

/// Blocks of the encoder in evaluation mode (no dropout, no final norm).
pub fn encoder_forward<T: Scalar>(cfg: &EncoderConfig, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let tr = encoder_on_tape(&mut tape, cfg, &bound, "", xv, None)?;
    Ok(tape.value(tr.out).clone())
}
