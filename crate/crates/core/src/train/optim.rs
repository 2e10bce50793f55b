use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments per parameter path, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    /// Completed updates.
    pub t: u64,
    /// Updates skipped because a gradient was not finite.
    pub rejected: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        for (p, t) in params.iter() {
            m.insert(p, Tensor::zeros(t.shape().to_vec()));
        }
        Self { v: m.clone(), m, t: 0, rejected: 0 }
    }
}

/// Outcome of [`adamw_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or ±inf; parameters and moments are untouched.
    Rejected,
}

/// One AdamW update at learning rate `lr`:
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    opt: &AdamW,
    lr: f64,
) -> Result<StepOutcome> {
    for (path, p) in params.iter() {
        let g = grads.get(path)?;
        if g.shape() != p.shape() || state.m.get(path)?.shape() != p.shape() {
            return Err(Error::shape(format!("optimizer state for `{path}` does not match the parameter")));
        }
    }
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        state.rejected += 1;
        log::warn!("non-finite gradient; update skipped ({} rejected so far)", state.rejected);
        return Ok(StepOutcome::Rejected);
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
    let c1 = T::of(1.0 - opt.beta1.powi(t));
    let c2 = T::of(1.0 - opt.beta2.powi(t));
    let (lr_t, decay, eps) = (T::of(lr), T::of(1.0 - lr * opt.weight_decay), T::of(opt.eps));
    let one = T::one();
    for (path, p) in params.iter_mut() {
        let g = grads.get(path)?.data();
        let m = state.m.get_mut(path)?.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (one - b1) * gi;
        }
        let v = state.v.get_mut(path)?.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (one - b2) * gi * gi;
        }
        let (m, v) = (state.m.get(path)?.data(), state.v.get(path)?.data());
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi = *pi * decay - lr_t * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data().iter().map(|v| v.f64() * v.f64())).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64([1], &[v]).unwrap());
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single(1.5);
        let mut st = AdamState::zeros_like(&p);
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        for _ in 0..3 {
            adamw_step(&mut p, &single(0.0), &mut st, &opt, 1e-3).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut p = single(2.0);
        let mut st = AdamState::zeros_like(&p);
        let opt = AdamW { weight_decay: 0.1, ..AdamW::default() };
        adamw_step(&mut p, &single(0.0), &mut st, &opt, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn non_finite_grad_rejected() {
        let mut p = single(1.0);
        let mut st = AdamState::zeros_like(&p);
        let out = adamw_step(&mut p, &single(f64::NAN), &mut st, &AdamW::default(), 1e-3).unwrap();
        assert_eq!(out, StepOutcome::Rejected);
        assert_eq!((st.t, st.rejected), (0, 1));
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.get("a").unwrap().frobenius_norm() - 1.0).abs() < 1e-12);
    }
}
