//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Every operation evaluates eagerly, appends a node holding its value and
//! whatever it needs for the backward rule, and returns a [`Var`] handle.
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because parents always precede children.

use std::collections::BTreeMap;

use rand::Rng;

use crate::kernels::KernelSpec;
use crate::tensor::{self, gelu, gelu_grad, ContractPlan, ContractSpec, Tensor};
use crate::{Error, Result, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Matmul(Var, Var),
    Contract(Var, Var, ContractSpec),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Gelu(Var),
    Dropout(Var, Tensor<T>),
    Concat(Vec<Var>, usize),
    Tile(Var),
    GatherRows(Var, Vec<Vec<usize>>),
    KernelScores(Var, KernelSpec),
    Mse(Var, Tensor<T>),
    CrossEntropy(Var, Vec<usize>, Tensor<T>),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Single writer; build one per batch shard.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input. Leaves with `trainable` set receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x + b` with `b`'s shape a suffix of `x`'s (bias, positional table).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.value(x).add_broadcast(self.value(b))?;
        Ok(self.push(v, Op::AddBroadcast(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let v = self.value(x).mul(&c)?;
        Ok(self.push(v, Op::MulConst(x, c), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b), &[a, b]))
    }

    pub fn contract(&mut self, a: Var, b: Var, spec: &str) -> Result<Var> {
        let plan = ContractPlan::new(spec, self.shape(a), self.shape(b))?;
        let v = plan.execute(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Contract(a, b, plan.spec().clone()), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        Ok(self.push(v, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).ndim().checked_sub(1).ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let v = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = tensor::layer_norm_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out.y,
            Op::LayerNorm { x, gamma, beta, xhat: out.xhat, rstd: out.rstd },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Inverted dropout; the identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(self.shape(x).to_vec(), |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        let v = self.value(x).mul(&mask)?;
        Ok(self.push(v, Op::Dropout(x, mask), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Repeats `x` along new leading axes of extents `leading`.
    pub fn tile(&mut self, x: Var, leading: &[usize]) -> Result<Var> {
        let base = self.value(x);
        let reps: usize = leading.iter().product();
        let mut shape = leading.to_vec();
        shape.extend_from_slice(base.shape());
        let mut data = Vec::with_capacity(reps * base.numel());
        for _ in 0..reps {
            data.extend_from_slice(base.data());
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Tile(x), &[x]))
    }

    /// Per-batch row selection: `x: (B, S, D)`, `idx[b]` lists rows of batch
    /// entry `b`; every list has the same length `K`. Output `(B, K, D)`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let [b, s, d] = xv.shape() else {
            return Err(Error::shape(format!("gather_rows expects (B,S,D), got {:?}", xv.shape())));
        };
        let (b, s, d) = (*b, *s, *d);
        if idx.len() != b {
            return Err(Error::shape(format!("gather_rows: {} index lists for batch {b}", idx.len())));
        }
        let k = idx.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(b * k * d);
        for (bi, rows) in idx.iter().enumerate() {
            if rows.len() != k {
                return Err(Error::shape("gather_rows: ragged index lists"));
            }
            for &r in rows {
                if r >= s {
                    return Err(Error::shape(format!("gather_rows: row {r} out of range {s}")));
                }
                data.extend_from_slice(&xv.data()[(bi * s + r) * d..(bi * s + r + 1) * d]);
            }
        }
        let v = Tensor::new([b, k, d], data)?;
        Ok(self.push(v, Op::GatherRows(x, idx), &[x]))
    }

    /// Pairwise token scores `score[.., s, r] = Σ_{d1,d2} k(x[.., s, d1], x[.., r, d2])`.
    pub fn kernel_scores(&mut self, x: Var, kernel: &KernelSpec) -> Result<Var> {
        let v = crate::kernels::pair_scores(self.value(x), kernel)?;
        Ok(self.push(v, Op::KernelScores(x, kernel.clone()), &[x]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let diff = self.value(x).sub(&target)?;
        let n = T::of(diff.numel().max(1) as f64);
        let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(x, target), &[x]))
    }

    /// Mean cross-entropy of `(B, C)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, c] = lv.shape() else {
            return Err(Error::shape(format!("cross_entropy expects (B,C), got {:?}", lv.shape())));
        };
        let (b, c) = (*b, *c);
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::invalid("cross_entropy labels do not match logits"));
        }
        let probs = tensor::softmax(lv, 1)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs.data()[i * c + l].max(T::min_positive_value()).ln())
            .sum::<T>()
            / T::of(b as f64);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, labels.to_vec(), probs), &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Autograd(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autograd("loss does not depend on any trainable leaf".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.backward_node(node, &g)?;
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::AddBroadcast(x, b) => vec![(*x, g.clone()), (*b, g.sum_to_suffix(val(*b).shape())?)],
            Op::Scale(x, s) => vec![(*x, g.scale(*s))],
            Op::MulConst(x, c) => vec![(*x, g.mul(c)?)],
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, g.matmul(&bv.transpose()?)?));
                }
                if wants(*b) {
                    let gb = if bv.ndim() == 2 {
                        let k = av.dim(av.ndim() - 1);
                        let n = g.dim(g.ndim() - 1);
                        let a2 = av.reshape([av.numel() / k, k])?.transpose()?;
                        a2.matmul(&g.reshape([g.numel() / n, n])?)?
                    } else {
                        av.transpose()?.matmul(g)?
                    };
                    out.push((*b, gb));
                }
                out
            }
            Op::Contract(a, b, spec) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, contract_grad(g, &spec.out, val(*b), &spec.b, val(*a), &spec.a)?));
                }
                if wants(*b) {
                    out.push((*b, contract_grad(g, &spec.out, val(*a), &spec.a, val(*b), &spec.b)?));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma);
                let d = gam.numel();
                let inv_d = T::one() / T::of(d as f64);
                let mut gx = g.clone();
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for ((gr, hr), &r) in gx.data_mut().chunks_mut(d).zip(xhat.data().chunks(d)).zip(rstd) {
                    let mut mean_gh = T::zero();
                    let mut mean_ghx = T::zero();
                    for j in 0..d {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let gh = gr[j] * gam.data()[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                    }
                    mean_gh *= inv_d;
                    mean_ghx *= inv_d;
                    for j in 0..d {
                        let gh = gr[j] * gam.data()[j];
                        gr[j] = r * (gh - mean_gh - hr[j] * mean_ghx);
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor::new([d], ggamma)?),
                    (*beta, Tensor::new([d], gbeta)?),
                ]
            }
            Op::Gelu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv))?)],
            Op::Dropout(x, mask) => vec![(*x, g.mul(mask)?)],
            Op::Concat(parts, axis) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = val(*p).dim(*axis);
                    out.push((*p, g.narrow(*axis, start, start + len)?));
                    start += len;
                }
                out
            }
            Op::Tile(x) => vec![(*x, g.sum_to_suffix(val(*x).shape())?)],
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let (s, d) = (xv.dim(1), xv.dim(2));
                let k = g.dim(1);
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                for (bi, rows) in idx.iter().enumerate() {
                    for (ki, &r) in rows.iter().enumerate() {
                        let src = &g.data()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                        let dst = &mut gx.data_mut()[(bi * s + r) * d..(bi * s + r + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::KernelScores(x, kernel) => vec![(*x, crate::kernels::pair_scores_grad(val(*x), kernel, g)?)],
            Op::Mse(x, target) => {
                let gs = g.item()?;
                let n = T::of(target.numel().max(1) as f64);
                let two = T::of(2.0);
                vec![(*x, val(*x).zip_map(target, |a, b| two * (a - b) / n * gs)?)]
            }
            Op::CrossEntropy(x, labels, probs) => {
                let gs = g.item()?;
                let c = probs.dim(1);
                let inv_b = T::one() / T::of(labels.len() as f64);
                let mut gx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gx.data_mut()[i * c + l] -= T::one();
                }
                vec![(*x, gx.scale(inv_b * gs))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item()?))],
        })
    }
}

/// Gradient of one contraction operand: `einsum(out, other -> wrt)`,
/// broadcasting along indices of `wrt` that the other two lack.
fn contract_grad<T: Scalar>(
    g: &Tensor<T>,
    out_idx: &[char],
    other: &Tensor<T>,
    other_idx: &[char],
    wrt: &Tensor<T>,
    wrt_idx: &[char],
) -> Result<Tensor<T>> {
    let mut extra = BTreeMap::new();
    for (c, &e) in wrt_idx.iter().zip(wrt.shape()) {
        if !out_idx.contains(c) && !other_idx.contains(c) {
            extra.insert(*c, e);
        }
    }
    let spec = ContractSpec { a: out_idx.to_vec(), b: other_idx.to_vec(), out: wrt_idx.to_vec() };
    ContractPlan::with_broadcast(spec, g.shape(), other.shape(), &extra)?.execute(g, other)
}
