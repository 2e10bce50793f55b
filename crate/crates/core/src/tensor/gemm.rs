use rayon::prelude::*;

use crate::Scalar;

// below this many multiply-adds the rayon split costs more than it saves
const PAR_THRESHOLD: usize = 1 << 15;
const ROW_BLOCK: usize = 16;

/// `c = a · b` for row-major `a: (m, k)`, `b: (k, n)`, `c: (m, n)`.
///
/// Each output row is produced by exactly one thread in a fixed order, so
/// results do not depend on the thread count.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k.max(1)))
            .for_each(|(cb, ab)| gemm_block(ab, b, cb, k, n));
    } else {
        gemm_block(a, b, c, k, n);
    }
}

fn gemm_block<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let rows = c.len() / n;
    if k == 0 {
        c.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    T::gemm(a, b, c, rows, k, n);
}

/// Independent products `c[i] = a[i] · b[i]` over `batch` entries.
pub(crate) fn batched_gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    if batch == 0 || m * n == 0 {
        return;
    }
    let work = batch * m * k * n;
    if work >= PAR_THRESHOLD && batch > 1 {
        c.par_chunks_mut(m * n).enumerate().for_each(|(i, cb)| {
            gemm_block(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], cb, k, n)
        });
    } else {
        for i in 0..batch {
            gemm(
                &a[i * m * k..(i + 1) * m * k],
                &b[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_across_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (70, 300, 33), (17, 0, 4)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![f64::NAN; m * n];
            gemm(&a, &b, &mut c, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
