//! Two-operand Einstein summation.
//!
//! A spec such as `"bsrde,hrde->bsh"` is parsed once into a [`ContractPlan`].
//! Execution lowers the contraction to a batched matrix multiply: indices are
//! classified as batch (both operands and output), free (one operand and
//! output), contracted (both operands, not output) or summed (one operand
//! only), the operands are permuted into `(batch, free, contracted)` order and
//! handed to [`super::gemm`]. [`contract_loop_nest`] evaluates the same plan as
//! a plain loop nest.

use std::collections::BTreeMap;

use super::{numel, strides, Tensor};
use crate::{Error, Result, Scalar};

/// Parsed index lists of a two-operand einsum expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractSpec {
    pub a: Vec<char>,
    pub b: Vec<char>,
    pub out: Vec<char>,
}

impl ContractSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let err = |reason: &str| Error::Spec { spec: spec.to_string(), reason: reason.to_string() };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, out) = match compact.split_once("->") {
            Some((l, r)) => (l, Some(r)),
            None => (compact.as_str(), None),
        };
        let operands: Vec<&str> = lhs.split(',').collect();
        if operands.len() != 2 {
            return Err(err("expected exactly two operands"));
        }
        let parse_list = |s: &str, what: &str| -> Result<Vec<char>> {
            let mut v: Vec<char> = Vec::with_capacity(s.len());
            for c in s.chars() {
                if !c.is_ascii_alphabetic() {
                    return Err(err(&format!("bad character `{c}` in {what}")));
                }
                if v.contains(&c) {
                    return Err(err(&format!("index `{c}` repeated within {what}")));
                }
                v.push(c);
            }
            Ok(v)
        };
        let a = parse_list(operands[0], "first operand")?;
        let b = parse_list(operands[1], "second operand")?;
        let out = match out {
            Some(o) => parse_list(o, "output")?,
            None => {
                // implicit output: indices that occur exactly once, alphabetical
                let mut once: Vec<char> = a
                    .iter()
                    .chain(&b)
                    .copied()
                    .filter(|c| a.contains(c) ^ b.contains(c))
                    .collect();
                once.sort_unstable();
                once
            }
        };
        if let Some(c) = out.iter().find(|c| !a.contains(c) && !b.contains(c)) {
            return Err(err(&format!("output index `{c}` absent from inputs")));
        }
        Ok(Self { a, b, out })
    }
}

impl std::fmt::Display for ContractSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.a), s(&self.b), s(&self.out))
    }
}

/// A contraction bound to concrete operand shapes.
#[derive(Debug, Clone)]
pub struct ContractPlan {
    spec: ContractSpec,
    extents: BTreeMap<char, usize>,
    out_shape: Vec<usize>,
}

impl ContractPlan {
    pub fn new(spec: &str, a_shape: &[usize], b_shape: &[usize]) -> Result<Self> {
        Self::from_spec(ContractSpec::parse(spec)?, a_shape, b_shape, &BTreeMap::new())
    }

    /// Like [`ContractPlan::new`] but output indices may be missing from both
    /// operands when their extent is supplied; the result is broadcast along
    /// them. Used by the gradient of contractions that sum an index away.
    pub(crate) fn with_broadcast(
        spec: ContractSpec,
        a_shape: &[usize],
        b_shape: &[usize],
        extra: &BTreeMap<char, usize>,
    ) -> Result<Self> {
        Self::from_spec(spec, a_shape, b_shape, extra)
    }

    fn from_spec(
        spec: ContractSpec,
        a_shape: &[usize],
        b_shape: &[usize],
        extra: &BTreeMap<char, usize>,
    ) -> Result<Self> {
        let spec_err = |reason: String| Error::Spec { spec: spec.to_string(), reason };
        if spec.a.len() != a_shape.len() {
            return Err(spec_err(format!("first operand has rank {}, spec names {}", a_shape.len(), spec.a.len())));
        }
        if spec.b.len() != b_shape.len() {
            return Err(spec_err(format!("second operand has rank {}, spec names {}", b_shape.len(), spec.b.len())));
        }
        let mut extents = BTreeMap::new();
        for (c, &e) in spec.a.iter().zip(a_shape).chain(spec.b.iter().zip(b_shape)) {
            if let Some(&prev) = extents.get(c) {
                if prev != e {
                    return Err(Error::shape(format!(
                        "index `{c}` has extent {prev} in one operand and {e} in the other ({spec})"
                    )));
                }
            } else {
                extents.insert(*c, e);
            }
        }
        for c in &spec.out {
            if !extents.contains_key(c) {
                match extra.get(c) {
                    Some(&e) => {
                        extents.insert(*c, e);
                    }
                    None => return Err(spec_err(format!("output index `{c}` absent from inputs"))),
                }
            }
        }
        let out_shape = spec.out.iter().map(|c| extents[c]).collect();
        Ok(Self { spec, extents, out_shape })
    }

    pub fn spec(&self) -> &ContractSpec {
        &self.spec
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn extent(&self, index: char) -> Option<usize> {
        self.extents.get(&index).copied()
    }

    fn check_operands<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        let ok = |spec: &[char], shape: &[usize]| {
            spec.len() == shape.len() && spec.iter().zip(shape).all(|(c, &e)| self.extents[c] == e)
        };
        if !ok(&self.spec.a, a.shape()) || !ok(&self.spec.b, b.shape()) {
            return Err(Error::shape(format!(
                "operands {:?}, {:?} do not match plan {}",
                a.shape(),
                b.shape(),
                self.spec
            )));
        }
        Ok(())
    }

    /// Evaluates the plan by lowering to a batched matrix multiply.
    pub fn execute<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_operands(a, b)?;
        let ContractSpec { a: ai, b: bi, out: oi } = &self.spec;
        let in_a = |c: &char| ai.contains(c);
        let in_b = |c: &char| bi.contains(c);
        let in_o = |c: &char| oi.contains(c);

        let (a, ai) = sum_only_axes(a, ai, |c| in_b(c) || in_o(c))?;
        let (b, bi) = sum_only_axes(b, bi, |c| in_a(c) || in_o(c))?;

        let batch: Vec<char> = oi.iter().copied().filter(|c| in_a(c) && in_b(c)).collect();
        let a_free: Vec<char> = oi.iter().copied().filter(|c| in_a(c) && !in_b(c)).collect();
        let b_free: Vec<char> = oi.iter().copied().filter(|c| in_b(c) && !in_a(c)).collect();
        let contracted: Vec<char> = ai.iter().copied().filter(|c| in_b(c) && !in_o(c)).collect();

        let order_a: Vec<char> = batch.iter().chain(&a_free).chain(&contracted).copied().collect();
        let order_b: Vec<char> = batch.iter().chain(&contracted).chain(&b_free).copied().collect();
        let a = a.permute(&positions(&ai, &order_a))?;
        let b = b.permute(&positions(&bi, &order_b))?;

        let ext = |v: &[char]| v.iter().map(|c| self.extents[c]).product::<usize>();
        let (nb, m, k, n) = (ext(&batch), ext(&a_free), ext(&contracted), ext(&b_free));
        let mut data = vec![T::zero(); nb * m * n];
        super::gemm::batched_gemm(a.data(), b.data(), &mut data, nb, m, k, n);

        let mid_order: Vec<char> = batch.iter().chain(&a_free).chain(&b_free).copied().collect();
        let mid_shape: Vec<usize> = mid_order.iter().map(|c| self.extents[c]).collect();
        let mid = Tensor::new(mid_shape, data)?;
        let present: Vec<char> = oi.iter().copied().filter(|c| in_a(c) || in_b(c)).collect();
        let mid = mid.permute(&positions(&mid_order, &present))?;
        if present.len() == oi.len() {
            return Ok(mid);
        }
        // broadcast along output indices that neither operand carries
        let mid_strides = strides(mid.shape());
        let src_stride: Vec<usize> = oi
            .iter()
            .map(|c| present.iter().position(|p| p == c).map_or(0, |p| mid_strides[p]))
            .collect();
        Ok(Tensor::from_fn(self.out_shape.clone(), |idx| {
            let off: usize = idx.iter().zip(&src_stride).map(|(i, s)| i * s).sum();
            mid.data()[off]
        }))
    }
}

/// Sums away axes of `t` whose index fails `keep`.
fn sum_only_axes<T: Scalar>(
    t: &Tensor<T>,
    idx: &[char],
    keep: impl Fn(&char) -> bool,
) -> Result<(Tensor<T>, Vec<char>)> {
    let mut t = t.clone();
    let mut idx = idx.to_vec();
    for axis in (0..idx.len()).rev() {
        if !keep(&idx[axis]) {
            t = t.sum_axis(axis)?;
            idx.remove(axis);
        }
    }
    Ok((t, idx))
}

fn positions(from: &[char], to: &[char]) -> Vec<usize> {
    to.iter().map(|c| from.iter().position(|f| f == c).expect("index present")).collect()
}

/// Einstein summation of two operands, e.g. `contract(&a, &b, "bij,bjk->bik")`.
pub fn contract<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, spec: &str) -> Result<Tensor<T>> {
    ContractPlan::new(spec, a.shape(), b.shape())?.execute(a, b)
}

/// Same contraction as [`contract`] evaluated as one loop nest over every
/// distinct index. Slow; kept for small-extent cross-checks.
pub fn contract_loop_nest<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, spec: &str) -> Result<Tensor<T>> {
    let plan = ContractPlan::new(spec, a.shape(), b.shape())?;
    let all: Vec<char> = plan.extents.keys().copied().collect();
    let ext: Vec<usize> = all.iter().map(|c| plan.extents[c]).collect();
    let stride_of = |idx: &[char], shape: &[usize]| -> Vec<usize> {
        let s = strides(shape);
        all.iter().map(|c| idx.iter().position(|x| x == c).map_or(0, |p| s[p])).collect()
    };
    let sa = stride_of(&plan.spec.a, a.shape());
    let sb = stride_of(&plan.spec.b, b.shape());
    let so = stride_of(&plan.spec.out, &plan.out_shape);
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    let total = numel(&ext);
    let mut idx = vec![0usize; all.len()];
    let (mut oa, mut ob, mut oo) = (0usize, 0usize, 0usize);
    for _ in 0..total {
        out[oo] += a.data()[oa] * b.data()[ob];
        for ax in (0..all.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            oo += so[ax];
            if idx[ax] < ext[ax] {
                break;
            }
            oa -= sa[ax] * ext[ax];
            ob -= sb[ax] * ext[ax];
            oo -= so[ax] * ext[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(plan.out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::<f64>::eye(2);
        let b = Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(contract(&a, &b, "ij,jk->ik").unwrap(), b);
    }

    #[test]
    fn dot_product_to_scalar() {
        let a = Tensor::<f64>::from_f64([3], &[1., 2., 3.]).unwrap();
        let c = contract(&a, &a, "i,i->").unwrap();
        assert_eq!(c.shape(), &[] as &[usize]);
        assert_eq!(c.item().unwrap(), 14.0);
    }

    #[test]
    fn rejects_malformed_specs() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([3, 4]);
        assert!(matches!(contract(&a, &b, "ij->ij"), Err(Error::Spec { .. })));
        assert!(matches!(contract(&a, &b, "ij,jk->iz"), Err(Error::Spec { .. })));
        assert!(matches!(contract(&a, &b, "ii,jk->k"), Err(Error::Spec { .. })));
        assert!(matches!(contract(&a, &b, "i1,jk->k"), Err(Error::Spec { .. })));
        assert!(matches!(contract(&a, &b, "ij,ik->jk"), Err(Error::Shape(_))));
        assert!(matches!(contract(&a, &b, "ijk,jk->ik"), Err(Error::Spec { .. })));
    }

    #[test]
    fn implicit_output_follows_convention() {
        let spec = ContractSpec::parse("ij,jk").unwrap();
        assert_eq!(spec.out, vec!['i', 'k']);
    }

    #[test]
    fn summed_only_and_broadcast_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([5], 1.0, &mut rng);
        let fast = contract(&a, &b, "ij,k->k").unwrap();
        let slow = contract_loop_nest(&a, &b, "ij,k->k").unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);

        let spec = ContractSpec::parse("k,j->jk").unwrap();
        let mut extra = BTreeMap::new();
        extra.insert('i', 3);
        let spec = ContractSpec { out: vec!['i', 'j', 'k'], ..spec };
        let bvec = Tensor::<f64>::randn([4], 1.0, &mut rng);
        let plan = ContractPlan::with_broadcast(spec, &[5], &[4], &extra).unwrap();
        let r = plan.execute(&b, &bvec).unwrap();
        assert_eq!(r.shape(), &[3, 4, 5]);
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    assert_eq!(r.at(&[i, j, k]), b.at(&[k]) * bvec.at(&[j]));
                }
            }
        }
    }
}
