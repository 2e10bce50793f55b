//! Dense row-major tensors and the primitive operations the rest of the
//! crate contracts through.

mod contract;
mod gemm;
mod ops;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result, Scalar};

pub use contract::{contract, contract_loop_nest, ContractPlan, ContractSpec};
pub use gemm::gemm;
pub use ops::{conv2d_strided, gelu, gelu_grad, layer_norm, softmax};
pub(crate) use ops::layer_norm_stats;

/// Dense n-dimensional array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::NAME, self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` values, casting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self { shape, data }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| T::of(rng.random_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} of extent {ext}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Ok(Self { shape, data: self.data })
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("invalid permutation {:?} for rank {nd}", axes)));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        if n > 0 {
            let last = nd - 1;
            let inner = out_shape[last];
            let inner_stride = src_strides[last];
            let mut idx = vec![0usize; nd];
            let mut base = 0usize;
            let outer = n / inner;
            for _ in 0..outer {
                if inner_stride == 1 {
                    data.extend_from_slice(&self.data[base..base + inner]);
                } else {
                    data.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
                }
                // advance the odometer over all but the last axis
                for ax in (0..last).rev() {
                    idx[ax] += 1;
                    base += src_strides[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    base -= src_strides[ax] * out_shape[ax];
                    idx[ax] = 0;
                }
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("add_assign {:?} += {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s shape.
    pub fn add_broadcast(&self, other: &Self) -> Result<Self> {
        let k = other.ndim();
        if k > self.ndim() || self.shape[self.ndim() - k..] != other.shape[..] {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} onto {:?}",
                other.shape, self.shape
            )));
        }
        let inner = other.numel().max(1);
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(inner) {
            for (a, &b) in chunk.iter_mut().zip(&other.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Sums the leading axes away so the result has shape `suffix`.
    pub fn sum_to_suffix(&self, suffix: &[usize]) -> Result<Self> {
        let k = suffix.len();
        if k > self.ndim() || self.shape[self.ndim() - k..] != suffix[..] {
            return Err(Error::shape(format!("cannot reduce {:?} to {:?}", self.shape, suffix)));
        }
        let inner = numel(suffix);
        let mut out = Self::zeros(suffix.to_vec());
        if inner > 0 {
            for chunk in self.data.chunks(inner) {
                for (a, &b) in out.data.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &self.data[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(Self { shape, data })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {nd}")));
        }
        for p in parts {
            if p.ndim() != nd
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Sub-tensor `start..end` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.ndim() || start > end || end > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}..{end}) on {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * mid + start) * inner..(o * mid + end) * inner]);
        }
        Ok(Self { shape, data })
    }

    /// Matrix product over the last two axes.
    ///
    /// `rhs` is either a plain `(k, n)` matrix shared by every batch entry or
    /// carries the same leading batch axes as `self`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (batch, m, k) = split_matrix(&self.shape)?;
        let (rbatch, k2, n) = split_matrix(&rhs.shape)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {:?} x {:?}", self.shape, rhs.shape)));
        }
        let shared = rhs.ndim() == 2;
        if !shared && self.shape[..self.ndim() - 2] != rhs.shape[..rhs.ndim() - 2] {
            return Err(Error::shape(format!(
                "matmul batch axes differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut shape = self.shape[..self.ndim() - 2].to_vec();
        shape.extend([m, n]);
        let mut data = vec![T::zero(); batch * m * n];
        if shared {
            gemm(&self.data, &rhs.data, &mut data, batch * m, k, n);
        } else {
            debug_assert_eq!(batch, rbatch);
            gemm::batched_gemm(&self.data, &rhs.data, &mut data, batch, m, k, n);
        }
        Ok(Self { shape, data })
    }
}

fn split_matrix(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2, got {:?}", shape)));
    }
    let nd = shape.len();
    Ok((shape[..nd - 2].iter().product(), shape[nd - 2], shape[nd - 1]))
}
