use nalgebra::DMatrix;

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// `W_attn ≈ U A Uᵀ` with `U: (D, D_head)` orthonormal columns.
#[derive(Debug, Clone)]
pub struct LowRank<T: Scalar> {
    pub u: Tensor<T>,
    pub a: Tensor<T>,
    /// `‖W_attn − U A Uᵀ‖_F / ‖W_attn‖_F`, zero when `W_attn = 0`.
    pub residual: f64,
}

fn to_matrix<T: Scalar>(t: &Tensor<T>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(t.dim(0), t.dim(1), t.data().iter().map(|v| v.f64()))
}

fn from_matrix<T: Scalar>(m: &DMatrix<f64>) -> Tensor<T> {
    Tensor::from_fn([m.nrows(), m.ncols()], |i| T::of(m[(i[0], i[1])]))
}

/// Factorizes `W_attn = Wq_i·Wk_iᵀ`: `U` spans the top-`D_head` left
/// singular vectors and `A = Uᵀ W_attn U`.
pub fn low_rank_factorize<T: Scalar>(wq: &Tensor<T>, wk: &Tensor<T>) -> Result<LowRank<T>> {
    let [d, dh] = wq.shape() else {
        return Err(Error::shape(format!("Wq_i must be (D, D_head), got {:?}", wq.shape())));
    };
    let (d, dh) = (*d, *dh);
    if wk.shape() != [d, dh] {
        return Err(Error::shape(format!("Wk_i {:?} does not match Wq_i {:?}", wk.shape(), wq.shape())));
    }
    if dh > d || dh == 0 {
        return Err(Error::invalid(format!("need 0 < D_head <= D, got D_head={dh}, D={d}")));
    }
    let w = to_matrix(wq) * to_matrix(wk).transpose();
    let norm = w.norm();
    let u = if norm == 0.0 {
        DMatrix::<f64>::identity(d, dh)
    } else {
        let svd = w.clone().svd(true, false);
        let full_u = svd.u.ok_or_else(|| Error::invalid("SVD did not return U"))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        DMatrix::from_fn(d, dh, |r, c| full_u[(r, order[c])])
    };
    let a = u.transpose() * &w * &u;
    let residual = if norm == 0.0 { 0.0 } else { (&w - &u * &a * u.transpose()).norm() / norm };
    Ok(LowRank { u: from_matrix(&u), a: from_matrix(&a), residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero_core() {
        let z = Tensor::<f64>::zeros([6, 2]);
        let lr = low_rank_factorize(&z, &z).unwrap();
        assert_eq!(lr.residual, 0.0);
        assert_eq!(lr.a.max_abs(), 0.0);
        let utu = lr.u.transpose().unwrap().matmul(&lr.u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::eye(2)).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_wide_heads() {
        let w = Tensor::<f64>::zeros([2, 3]);
        assert!(low_rank_factorize(&w, &w).is_err());
    }

    #[test]
    fn columns_orthonormal_for_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wq = Tensor::<f64>::randn([8, 3], 1.0, &mut rng);
        let wk = Tensor::<f64>::randn([8, 3], 1.0, &mut rng);
        let lr = low_rank_factorize(&wq, &wk).unwrap();
        let utu = lr.u.transpose().unwrap().matmul(&lr.u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::eye(3)).unwrap() < 1e-10);
        assert!(lr.residual > 0.0 && lr.residual < 1.0);
    }
}
