//! Inner and outer superposition functions as kernel-tensor contractions.
//!
//! For input `X: (B, S, D)` and reference `Ref: (B, R, D)`:
//!
//! ```text
//! Ψ(X)[b, s, h] = Σ_{r, d1, d2} K(X, Ref)[b, s, r, d1, d2] · W_inner[h, r, d1, d2]
//! Φ(Z)[b, s, e] = Σ_{r', h1, h2} K(Z, Ref')[b, s, r', h1, h2] · W_outer[e, r', h1, h2]
//! ```
//!
//! Dot-product attention without the softmax is one instance: linear kernel,
//! `Ref = X`, `W_inner[h, r] = δ_{hr}·W_q·W_kᵀ`, `Ref' = Xᵀ` and
//! `W_outer[e, r'] = W_v[r', e]·I`.

use serde::Serialize;

use crate::kernels::{kernel_tensor, KernelSpec, KernelTensor, KernelTensorPlan};
use crate::tensor::{contract, conv2d_strided, Tensor};
use crate::{Error, Result, Scalar};

/// Reference points a superposition function measures its input against.
#[derive(Debug, Clone)]
pub enum Reference<T: Scalar> {
    /// The function's own input.
    SelfReference,
    /// Fixed or trainable points, `(B, R, width)` or `(R, width)` shared across the batch.
    Points(Tensor<T>),
    /// The token/feature transpose of the layer input `X: (B, S, D)`, i.e.
    /// `R' = D` reference vectors of length `S`. Only meaningful for the outer function.
    InputTransposed,
}

/// Weights of the inner function.
#[derive(Debug, Clone)]
pub enum InnerWeights<T: Scalar> {
    /// `(H, R, D, D)`.
    Dense(Tensor<T>),
    /// `W[h, r] = δ_{hr}·M` for a `(D, D)` block `M`; `H = R` follows the reference length.
    DiagonalBlocks(Tensor<T>),
}

/// Weights of the outer function.
#[derive(Debug, Clone)]
pub enum OuterWeights<T: Scalar> {
    /// `(E, R', H, H)`.
    Dense(Tensor<T>),
    /// `W[e, r'] = w[e, r']·I_H` stored as the `(E, R')` scalar field `w`; the
    /// identity is expanded to the input width at apply time.
    ScaledIdentity(Tensor<T>),
}

impl<T: Scalar> InnerWeights<T> {
    fn dense(&self, r: usize, d: usize) -> Result<Tensor<T>> {
        match self {
            InnerWeights::Dense(w) => {
                if w.ndim() != 4 || w.dim(1) != r || w.dim(2) != d || w.dim(3) != d {
                    return Err(Error::shape(format!(
                        "inner weights {:?} inconsistent with R={r}, D={d}",
                        w.shape()
                    )));
                }
                Ok(w.clone())
            }
            InnerWeights::DiagonalBlocks(m) => {
                if m.shape() != [d, d] {
                    return Err(Error::shape(format!("diagonal block {:?} is not {d}x{d}", m.shape())));
                }
                Ok(Tensor::from_fn([r, r, d, d], |i| if i[0] == i[1] { m.at(&[i[2], i[3]]) } else { T::zero() }))
            }
        }
    }
}

impl<T: Scalar> OuterWeights<T> {
    fn dense(&self, r: usize, h: usize) -> Result<Tensor<T>> {
        match self {
            OuterWeights::Dense(w) => {
                if w.ndim() != 4 || w.dim(1) != r || w.dim(2) != h || w.dim(3) != h {
                    return Err(Error::shape(format!(
                        "outer weights {:?} inconsistent with R'={r}, H={h}",
                        w.shape()
                    )));
                }
                Ok(w.clone())
            }
            OuterWeights::ScaledIdentity(w) => {
                if w.ndim() != 2 || w.dim(1) != r {
                    return Err(Error::shape(format!("scaled-identity field {:?} inconsistent with R'={r}", w.shape())));
                }
                Ok(Tensor::from_fn([w.dim(0), r, h, h], |i| if i[2] == i[3] { w.at(&[i[0], i[1]]) } else { T::zero() }))
            }
        }
    }
}

/// Inner/outer superposition pair `f = Φ ∘ Ψ`.
#[derive(Debug, Clone)]
pub struct SuperpositionLayer<T: Scalar> {
    pub inner: InnerWeights<T>,
    pub outer: OuterWeights<T>,
    pub inner_ref: Reference<T>,
    pub outer_ref: Reference<T>,
    pub inner_spec: KernelSpec,
    pub outer_spec: KernelSpec,
    pub plan: KernelTensorPlan,
}

fn resolve_reference<T: Scalar>(
    reference: &Reference<T>,
    own_input: &Tensor<T>,
    layer_input: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let b = own_input.dim(0);
    match reference {
        Reference::SelfReference => Ok(own_input.clone()),
        Reference::Points(p) if p.ndim() == 2 => {
            let mut data = Vec::with_capacity(b * p.numel());
            for _ in 0..b {
                data.extend_from_slice(p.data());
            }
            Tensor::new([b, p.dim(0), p.dim(1)], data)
        }
        Reference::Points(p) if p.ndim() == 3 => Ok(p.clone()),
        Reference::Points(p) => Err(Error::shape(format!("reference points must be rank 2 or 3, got {:?}", p.shape()))),
        Reference::InputTransposed => {
            let x = layer_input.ok_or_else(|| Error::invalid("transposed-input reference needs the layer input"))?;
            x.permute(&[0, 2, 1])
        }
    }
}

/// `Σ_{r,d1,d2} K(x, ref)[b,s,r,d1,d2]·w[h,r,d1,d2]`, either from the full
/// kernel tensor or by accumulating streamed tiles.
fn superpose<T: Scalar>(
    x: &Tensor<T>,
    reference: &Tensor<T>,
    w: &Tensor<T>,
    spec: &KernelSpec,
    plan: &KernelTensorPlan,
) -> Result<Tensor<T>> {
    match kernel_tensor(x, reference, spec, plan)? {
        KernelTensor::Full(k) => contract(&k, w, "bsrde,hrde->bsh"),
        KernelTensor::Tiles(tiles) => {
            let (b, s, h) = (x.dim(0), x.dim(1), w.dim(0));
            let partials = tiles.par_map(|tile| -> Result<(usize, Tensor<T>)> {
                let wr = w.narrow(1, tile.r0, tile.r1)?;
                Ok((tile.s0, contract(&tile.data, &wr, "bsrde,hrde->bsh")?))
            });
            let mut out = Tensor::zeros([b, s, h]);
            // summed in (s, r) tile order so the result is independent of scheduling
            for partial in partials {
                let (s0, p) = partial?;
                let ns = p.dim(1);
                for bi in 0..b {
                    for i in 0..ns {
                        let dst = &mut out.data_mut()[(bi * s + s0 + i) * h..(bi * s + s0 + i + 1) * h];
                        let src = &p.data()[(bi * ns + i) * h..(bi * ns + i + 1) * h];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

fn check_batch_input<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.ndim() != 3 {
        return Err(Error::shape(format!("{what} must be (B, S, width), got {:?}", x.shape())));
    }
    Ok(())
}

impl<T: Scalar> SuperpositionLayer<T> {
    /// Ψ: `(B, S, D) -> (B, S, H)`.
    pub fn inner_apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_batch_input(x, "inner input")?;
        let reference = resolve_reference(&self.inner_ref, x, Some(x))?;
        if reference.dim(0) != x.dim(0) || reference.dim(2) != x.dim(2) {
            return Err(Error::shape(format!("inner reference {:?} vs input {:?}", reference.shape(), x.shape())));
        }
        let w = self.inner.dense(reference.dim(1), x.dim(2))?;
        superpose(x, &reference, &w, &self.inner_spec, &self.plan)
    }

    /// Φ: `(B, S, H) -> (B, S, E)`. `layer_input` is the `X` fed to Ψ, needed
    /// when the outer reference is [`Reference::InputTransposed`].
    pub fn outer_apply(&self, z: &Tensor<T>, layer_input: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        check_batch_input(z, "outer input")?;
        let reference = resolve_reference(&self.outer_ref, z, layer_input)?;
        if reference.dim(0) != z.dim(0) || reference.dim(2) != z.dim(2) {
            return Err(Error::shape(format!("outer reference {:?} vs input {:?}", reference.shape(), z.shape())));
        }
        let w = self.outer.dense(reference.dim(1), z.dim(2))?;
        superpose(z, &reference, &w, &self.outer_spec, &self.plan)
    }

    /// `Φ(Ψ(x))`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.inner_apply(x)?;
        self.outer_apply(&z, Some(x))
    }
}

/// `g(x) = Σ_r ⟨W_r, K(x, s_r)⟩_F` with `K(x, s)[d1, d2] = k(x[d1], s[d2])`.
pub fn frobenius_fit<T: Scalar>(w: &Tensor<T>, refs: &Tensor<T>, spec: &KernelSpec, x: &Tensor<T>) -> Result<T> {
    spec.validate()?;
    let [r, d1, d2] = w.shape() else {
        return Err(Error::shape(format!("W must be (R, D, D), got {:?}", w.shape())));
    };
    if d1 != d2 || refs.shape() != [*r, *d1] || x.shape() != [*d1] {
        return Err(Error::shape(format!(
            "frobenius_fit: W {:?}, refs {:?}, x {:?}",
            w.shape(),
            refs.shape(),
            x.shape()
        )));
    }
    let d = *d1;
    let mut g = T::zero();
    for ri in 0..*r {
        let sr = &refs.data()[ri * d..(ri + 1) * d];
        let wr = &w.data()[ri * d * d..(ri + 1) * d * d];
        for (i, &xi) in x.data().iter().enumerate() {
            for (j, &sj) in sr.iter().enumerate() {
                g += wr[i * d + j] * spec.eval(xi, sj);
            }
        }
    }
    Ok(g)
}

/// Outcome of a two-route equivalence check.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    /// Largest magnitude in the reference route, for scale.
    pub max_abs_value: f64,
}

/// Computes `X·Wq·Wkᵀ·Xᵀ·X·Wv` directly and as a superposition layer with
/// linear kernels, and reports how far apart the two results are.
pub fn attention_as_superposition<T: Scalar>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<EquivalenceReport> {
    let [s, d] = x.shape() else {
        return Err(Error::shape(format!("X must be (S, D), got {:?}", x.shape())));
    };
    let (s, d) = (*s, *d);
    let e = wq.shape().get(1).copied().unwrap_or(0);
    for (name, w) in [("Wq", wq), ("Wk", wk), ("Wv", wv)] {
        if w.shape() != [d, e] {
            return Err(Error::shape(format!("{name} must be ({d}, {e}), got {:?}", w.shape())));
        }
    }
    let direct = x.matmul(wq)?.matmul(&wk.transpose()?)?.matmul(&x.transpose()?)?.matmul(x)?.matmul(wv)?;

    let layer = SuperpositionLayer {
        inner: InnerWeights::DiagonalBlocks(wq.matmul(&wk.transpose()?)?),
        outer: OuterWeights::ScaledIdentity(wv.transpose()?),
        inner_ref: Reference::SelfReference,
        outer_ref: Reference::InputTransposed,
        inner_spec: KernelSpec::Linear,
        outer_spec: KernelSpec::Linear,
        plan: KernelTensorPlan::default(),
    };
    let via_kernels = layer.apply(&x.reshape([1, s, d])?)?.reshape([s, e])?;
    Ok(EquivalenceReport {
        max_abs_diff: direct.max_abs_diff(&via_kernels)?.f64(),
        max_abs_value: direct.max_abs().f64(),
    })
}

/// Runs the linear-kernel inner function two ways: as the superposition
/// contraction, and as a `(D, D)`-strided convolution of the reshaped kernel
/// tensor `K*: (B, S·D, S·D)` with `W_attn` as the filter.
pub fn conv_equivalence_check<T: Scalar>(
    x: &Tensor<T>,
    w_attn: &Tensor<T>,
    plan: &KernelTensorPlan,
) -> Result<EquivalenceReport> {
    let [b, s, d] = x.shape() else {
        return Err(Error::shape(format!("X must be (B, S, D), got {:?}", x.shape())));
    };
    let (b, s, d) = (*b, *s, *d);
    if w_attn.shape() != [d, d] {
        return Err(Error::shape(format!("W_attn must be ({d}, {d}), got {:?}", w_attn.shape())));
    }
    let plan = KernelTensorPlan { materialize: true, ..plan.clone() };
    let KernelTensor::Full(k) = kernel_tensor(x, x, &KernelSpec::Linear, &plan)? else {
        unreachable!("materialized plan");
    };
    let k_star = k.permute(&[0, 1, 3, 2, 4])?.into_reshape([b, 1, s * d, s * d])?;
    let conv = conv2d_strided(&k_star, &w_attn.reshape([1, 1, d, d])?, (d, d))?.into_reshape([b, s, s])?;

    let layer = SuperpositionLayer {
        inner: InnerWeights::DiagonalBlocks(w_attn.clone()),
        outer: OuterWeights::ScaledIdentity(Tensor::zeros([1, 1])),
        inner_ref: Reference::SelfReference,
        outer_ref: Reference::SelfReference,
        inner_spec: KernelSpec::Linear,
        outer_spec: KernelSpec::Linear,
        plan,
    };
    let psi = layer.inner_apply(x)?;
    Ok(EquivalenceReport { max_abs_diff: conv.max_abs_diff(&psi)?.f64(), max_abs_value: psi.max_abs().f64() })
}
