use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::KernelSpec;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Refusal threshold for materializing a kernel tensor: 2 GiB.
pub const DEFAULT_BUDGET_BYTES: u128 = 2 << 30;

/// How a kernel tensor is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTensorPlan {
    /// Tile extent along the token axis `S`.
    pub block_rows: usize,
    /// Tile extent along the reference axis `R`.
    pub block_refs: usize,
    /// Build the whole `(B, S, R, D, D)` tensor instead of streaming tiles.
    pub materialize: bool,
    pub budget_bytes: u128,
}

impl Default for KernelTensorPlan {
    fn default() -> Self {
        Self { block_rows: 8, block_refs: 8, materialize: true, budget_bytes: DEFAULT_BUDGET_BYTES }
    }
}

impl KernelTensorPlan {
    pub fn streamed(block_rows: usize, block_refs: usize) -> Self {
        Self { block_rows, block_refs, materialize: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 || self.block_refs == 0 {
            return Err(Error::invalid("kernel tensor tiles need extents >= 1"));
        }
        Ok(())
    }
}

/// Bytes needed to hold a `(B, S, R, D, D)` kernel tensor of `T`.
pub fn kernel_tensor_bytes<T: Scalar>(b: usize, s: usize, r: usize, d: usize) -> u128 {
    b as u128 * s as u128 * r as u128 * d as u128 * d as u128 * std::mem::size_of::<T>() as u128
}

/// One `(s, r)` block: `data` has shape `(B, s1 - s0, r1 - r0, D, D)`.
#[derive(Debug, Clone)]
pub struct KernelTile<T: Scalar> {
    pub s0: usize,
    pub s1: usize,
    pub r0: usize,
    pub r1: usize,
    pub data: Tensor<T>,
}

/// Result of [`kernel_tensor`].
pub enum KernelTensor<'a, T: Scalar> {
    Full(Tensor<T>),
    Tiles(KernelTiles<'a, T>),
}

/// Lazily produced tiles of a kernel tensor, in row-major `(s, r)` block order.
pub struct KernelTiles<'a, T: Scalar> {
    x: &'a Tensor<T>,
    reference: &'a Tensor<T>,
    spec: KernelSpec,
    block_rows: usize,
    block_refs: usize,
    next: usize,
}

impl<'a, T: Scalar> KernelTiles<'a, T> {
    fn coords(&self) -> Vec<(usize, usize)> {
        let (s, r) = (self.x.dim(1), self.reference.dim(1));
        let mut v = Vec::new();
        for s0 in (0..s).step_by(self.block_rows) {
            for r0 in (0..r).step_by(self.block_refs) {
                v.push((s0, r0));
            }
        }
        v
    }

    pub fn tile_count(&self) -> usize {
        self.x.dim(1).div_ceil(self.block_rows) * self.reference.dim(1).div_ceil(self.block_refs)
    }

    fn build(&self, s0: usize, r0: usize) -> KernelTile<T> {
        let s1 = (s0 + self.block_rows).min(self.x.dim(1));
        let r1 = (r0 + self.block_refs).min(self.reference.dim(1));
        let data = fill(self.x, self.reference, &self.spec, s0..s1, r0..r1);
        KernelTile { s0, s1, r0, r1, data }
    }

    /// Applies `f` to every tile in parallel; tiles arrive in no fixed order.
    pub fn par_for_each(&self, f: impl Fn(KernelTile<T>) + Sync + Send) {
        self.coords().into_par_iter().for_each(|(s0, r0)| f(self.build(s0, r0)));
    }

    /// Parallel map over tiles; results come back in `(s, r)` order.
    pub fn par_map<U: Send>(&self, f: impl Fn(KernelTile<T>) -> U + Sync + Send) -> Vec<U> {
        self.coords().into_par_iter().map(|(s0, r0)| f(self.build(s0, r0))).collect()
    }
}

impl<T: Scalar> Iterator for KernelTiles<'_, T> {
    type Item = KernelTile<T>;

    fn next(&mut self) -> Option<Self::Item> {
        let per_row = self.reference.dim(1).div_ceil(self.block_refs);
        if per_row == 0 || self.next >= self.tile_count() {
            return None;
        }
        let (bs, br) = (self.next / per_row, self.next % per_row);
        self.next += 1;
        Some(self.build(bs * self.block_rows, br * self.block_refs))
    }
}

fn fill<T: Scalar>(
    x: &Tensor<T>,
    reference: &Tensor<T>,
    spec: &KernelSpec,
    srange: std::ops::Range<usize>,
    rrange: std::ops::Range<usize>,
) -> Tensor<T> {
    let (b, s, d) = (x.dim(0), x.dim(1), x.dim(2));
    let r = reference.dim(1);
    let (ns, nr) = (srange.len(), rrange.len());
    let mut out = vec![T::zero(); b * ns * nr * d * d];
    let xd = x.data();
    let rd = reference.data();
    out.par_chunks_mut((ns * nr * d * d).max(1)).enumerate().for_each(|(bi, block)| {
        for (i, si) in srange.clone().enumerate() {
            let xrow = &xd[(bi * s + si) * d..(bi * s + si + 1) * d];
            for (j, ri) in rrange.clone().enumerate() {
                let rrow = &rd[(bi * r + ri) * d..(bi * r + ri + 1) * d];
                let cell = &mut block[(i * nr + j) * d * d..(i * nr + j + 1) * d * d];
                for (d1, &a) in xrow.iter().enumerate() {
                    for (d2, &c) in rrow.iter().enumerate() {
                        cell[d1 * d + d2] = spec.eval(a, c);
                    }
                }
            }
        }
    });
    Tensor::new([b, ns, nr, d, d], out).expect("tile extents")
}

/// Kernel tensor `K[b, s, r, d1, d2] = k(X[b, s, d1], Ref[b, r, d2])`.
///
/// With `plan.materialize` the full tensor is built, unless its size would
/// exceed `plan.budget_bytes`, in which case [`Error::BudgetExceeded`]
/// carries the estimate. Otherwise an iterator of tiles is returned.
pub fn kernel_tensor<'a, T: Scalar>(
    x: &'a Tensor<T>,
    reference: &'a Tensor<T>,
    spec: &KernelSpec,
    plan: &KernelTensorPlan,
) -> Result<KernelTensor<'a, T>> {
    spec.validate()?;
    plan.validate()?;
    let ([b, s, d], [rb, r, rd]) = (x.shape(), reference.shape()) else {
        return Err(Error::shape(format!(
            "kernel tensor needs X (B,S,D) and Ref (B,R,D), got {:?} and {:?}",
            x.shape(),
            reference.shape()
        )));
    };
    if b != rb || d != rd {
        return Err(Error::shape(format!(
            "kernel tensor: X {:?} and Ref {:?} disagree on B or D",
            x.shape(),
            reference.shape()
        )));
    }
    if plan.materialize {
        let estimate = kernel_tensor_bytes::<T>(*b, *s, *r, *d);
        if estimate > plan.budget_bytes {
            return Err(Error::BudgetExceeded { estimate_bytes: estimate, budget_bytes: plan.budget_bytes });
        }
        Ok(KernelTensor::Full(fill(x, reference, spec, 0..*s, 0..*r)))
    } else {
        Ok(KernelTensor::Tiles(KernelTiles {
            x,
            reference,
            spec: spec.clone(),
            block_rows: plan.block_rows,
            block_refs: plan.block_refs,
            next: 0,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full(k: KernelTensor<'_, f64>) -> Tensor<f64> {
        match k {
            KernelTensor::Full(t) => t,
            KernelTensor::Tiles(_) => panic!("expected a full tensor"),
        }
    }

    #[test]
    fn identity_rows_give_outer_products() {
        let x = Tensor::<f64>::from_f64([1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        let k = full(kernel_tensor(&x, &x, &KernelSpec::Linear, &KernelTensorPlan::default()).unwrap());
        assert_eq!(k.shape(), &[1, 2, 2, 2, 2]);
        for s in 0..2 {
            for r in 0..2 {
                for d1 in 0..2 {
                    for d2 in 0..2 {
                        let want = x.at(&[0, s, d1]) * x.at(&[0, r, d2]);
                        assert_eq!(k.at(&[0, s, r, d1, d2]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn gaussian_self_blocks_have_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let k = full(kernel_tensor(&x, &x, &spec, &KernelTensorPlan::default()).unwrap());
        for b in 0..2 {
            for s in 0..3 {
                for d in 0..4 {
                    assert_eq!(k.at(&[b, s, s, d, d]), 1.0);
                }
            }
        }
    }

    #[test]
    fn refuses_over_budget() {
        let x = Tensor::<f32>::zeros([1, 4, 8]);
        let plan = KernelTensorPlan { budget_bytes: 100, ..KernelTensorPlan::default() };
        match kernel_tensor(&x, &x, &KernelSpec::Linear, &plan) {
            Err(Error::BudgetExceeded { estimate_bytes, .. }) => assert_eq!(estimate_bytes, 4 * 4 * 64 * 4),
            _ => panic!("expected refusal"),
        }
    }

    #[test]
    fn mismatched_operands_rejected() {
        let x = Tensor::<f64>::zeros([1, 4, 3]);
        let r = Tensor::<f64>::zeros([2, 4, 3]);
        assert!(kernel_tensor(&x, &r, &KernelSpec::Linear, &KernelTensorPlan::default()).is_err());
        let r = Tensor::<f64>::zeros([1, 4, 2]);
        assert!(kernel_tensor(&x, &r, &KernelSpec::Linear, &KernelTensorPlan::default()).is_err());
    }

    #[test]
    fn tiles_reassemble_to_full_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::randn([2, 5, 3], 1.0, &mut rng);
        let r = Tensor::<f64>::randn([2, 6, 3], 1.0, &mut rng);
        let spec = KernelSpec::gaussian(0.9).unwrap();
        let k = full(kernel_tensor(&x, &r, &spec, &KernelTensorPlan::default()).unwrap());
        let KernelTensor::Tiles(tiles) = kernel_tensor(&x, &r, &spec, &KernelTensorPlan::streamed(2, 4)).unwrap()
        else {
            panic!("expected tiles")
        };
        assert_eq!(tiles.tile_count(), 6);
        let mut seen = 0;
        for tile in tiles {
            seen += 1;
            for b in 0..2 {
                for s in tile.s0..tile.s1 {
                    for rr in tile.r0..tile.r1 {
                        for d1 in 0..3 {
                            for d2 in 0..3 {
                                assert_eq!(
                                    tile.data.at(&[b, s - tile.s0, rr - tile.r0, d1, d2]),
                                    k.at(&[b, s, rr, d1, d2])
                                );
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(seen, 6);
    }
}
