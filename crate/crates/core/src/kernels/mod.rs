//! Scalar kernels `k(x, y)`, B-spline bases and the kernel tensor
//! `K[b, s, r, d1, d2] = k(X[b, s, d1], Ref[b, r, d2])`.

pub mod bspline;
pub(crate) mod stats;
mod tensor;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub use bspline::{bspline_basis, bspline_basis_all, step_difference, uniform_knots};
pub use stats::{kernel_stats, kernel_stats_with_dim, KernelStats};
pub use tensor::{
    kernel_tensor, kernel_tensor_bytes, KernelTensor, KernelTensorPlan, KernelTile, KernelTiles,
    DEFAULT_BUDGET_BYTES,
};

/// Choice of scalar kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `k(x, y) = x·y`
    Linear,
    /// `k(x, y) = exp(-(x - y)² / (2σ²))`
    Gaussian { sigma: f64 },
    /// `k(x, y) = Σ_i B_i(x) B_i(y)` over a shared knot grid.
    #[serde(rename = "bspline")]
    BSpline { knots: Vec<f64>, degree: usize },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let spec = KernelSpec::Gaussian { sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn bspline(knots: Vec<f64>, degree: usize) -> Result<Self> {
        let spec = KernelSpec::BSpline { knots, degree };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Gaussian { sigma } => {
                if *sigma > 0.0 && !sigma.is_nan() {
                    Ok(())
                } else {
                    Err(Error::Kernel(format!("gaussian sigma must be > 0, got {sigma}")))
                }
            }
            KernelSpec::BSpline { knots, degree } => bspline::validate_knots(knots, *degree),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Linear => "linear",
            KernelSpec::Gaussian { .. } => "gaussian",
            KernelSpec::BSpline { .. } => "bspline",
        }
    }

    /// `k(x, y)`. Assumes a validated spec.
    #[inline]
    pub fn eval<T: Scalar>(&self, x: T, y: T) -> T {
        match self {
            KernelSpec::Linear => x * y,
            KernelSpec::Gaussian { sigma } => {
                let d = x - y;
                (-(d * d) / T::of(2.0 * sigma * sigma)).exp()
            }
            KernelSpec::BSpline { knots, degree } => {
                let bx = bspline::all_unchecked(knots, *degree, x.f64());
                let by = bspline::all_unchecked(knots, *degree, y.f64());
                T::of(bx.iter().zip(&by).map(|(a, b)| a * b).sum())
            }
        }
    }

    /// Partial derivative of `k(x, y)` in its first argument.
    #[inline]
    pub fn dx<T: Scalar>(&self, x: T, y: T) -> T {
        match self {
            KernelSpec::Linear => y,
            KernelSpec::Gaussian { sigma } => {
                let s2 = T::of(sigma * sigma);
                -(x - y) / s2 * self.eval(x, y)
            }
            KernelSpec::BSpline { knots, degree } => {
                let dbx = bspline::derivative_all_unchecked(knots, *degree, x.f64());
                let by = bspline::all_unchecked(knots, *degree, y.f64());
                T::of(dbx.iter().zip(&by).map(|(a, b)| a * b).sum())
            }
        }
    }
}

/// Validated `k(x, y)`.
pub fn kernel_eval(spec: &KernelSpec, x: f64, y: f64) -> Result<f64> {
    spec.validate()?;
    Ok(spec.eval(x, y))
}

fn score_layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::shape(format!("pair scores need (.., S, D), got {:?}", x.shape())));
    }
    let (s, d) = (x.dim(nd - 2), x.dim(nd - 1));
    Ok((x.numel() / (s * d).max(1), s, d))
}

/// Token-pair scores `out[.., s, r] = Σ_{d1,d2} k(x[.., s, d1], x[.., r, d2])`:
/// the kernel tensor of `x` against itself summed over both feature axes.
pub fn pair_scores<T: Scalar>(x: &Tensor<T>, spec: &KernelSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (groups, s, d) = score_layout(x)?;
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 1] = s;
    let mut out = vec![T::zero(); groups * s * s];
    if groups > 0 && s > 0 {
        out.par_chunks_mut(s * s).enumerate().for_each(|(g, block)| {
            let xs = &x.data()[g * s * d..(g + 1) * s * d];
            for si in 0..s {
                for ri in 0..s {
                    let mut acc = T::zero();
                    for &a in &xs[si * d..(si + 1) * d] {
                        for &b in &xs[ri * d..(ri + 1) * d] {
                            acc += spec.eval(a, b);
                        }
                    }
                    block[si * s + ri] = acc;
                }
            }
        });
    }
    Tensor::new(shape, out)
}

/// Vector-Jacobian product of [`pair_scores`] for a symmetric kernel:
/// `gx[s, d1] = Σ_r (g[s, r] + g[r, s]) Σ_{d2} ∂₁k(x[s, d1], x[r, d2])`.
pub(crate) fn pair_scores_grad<T: Scalar>(x: &Tensor<T>, spec: &KernelSpec, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (groups, s, d) = score_layout(x)?;
    let mut gx = vec![T::zero(); x.numel()];
    if groups > 0 && s > 0 {
        gx.par_chunks_mut(s * d).enumerate().for_each(|(gi, block)| {
            let xs = &x.data()[gi * s * d..(gi + 1) * s * d];
            let gs = &g.data()[gi * s * s..(gi + 1) * s * s];
            for si in 0..s {
                for ri in 0..s {
                    let w = gs[si * s + ri] + gs[ri * s + si];
                    for d1 in 0..d {
                        let a = xs[si * d + d1];
                        let mut acc = T::zero();
                        for &b in &xs[ri * d..(ri + 1) * d] {
                            acc += spec.dx(a, b);
                        }
                        block[si * d + d1] += w * acc;
                    }
                }
            }
        });
    }
    Tensor::new(x.shape().to_vec(), gx)
}
