#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use superkernel::attention::{AttentionParams, Variant};
use superkernel::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major `(rows, cols)` matrix view over a flat slice.
struct Mat<'a> {
    data: &'a [f64],
    cols: usize,
}

impl Mat<'_> {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

fn affine(x: &[f64], w: &[f64], bias: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let rows = x.len() / d_in;
    let (x, w) = (Mat { data: x, cols: d_in }, Mat { data: w, cols: d_out });
    (0..rows)
        .flat_map(|i| (0..d_out).map(move |j| (i, j)))
        .map(|(i, j)| bias[j] + (0..d_in).map(|k| x.at(i, k) * w.at(k, j)).sum::<f64>())
        .collect()
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|v| *v = (*v - m).exp());
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= z);
}

/// Scalar-loop attention written from the algorithm definitions, for one
/// `(S, D)` sequence. Returns `(out (S, D), maps (heads, S, S))`.
pub fn naive_attention(params: &AttentionParams<f64>, x: &[f64], s: usize) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let (d, n, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let g = |role: &str| params.get(role).unwrap().data().to_vec();
    let scale = cfg.scale();
    // per-head token features, (S, D) with head h in columns h*dh..(h+1)*dh
    let (feat_q, feat_k, values) = match cfg.variant {
        Variant::Standard => {
            let q = affine(x, &g("wq"), &g("bq"), d, d);
            let k = affine(x, &g("wk"), &g("bk"), d, d);
            let v = affine(x, &g("wv"), &g("bv"), d, d);
            (q, k, v)
        }
        _ => {
            let t = affine(x, &g("u"), &g("b1"), d, d);
            (t.clone(), t.clone(), t)
        }
    };
    let mut maps = vec![0.0; n * s * s];
    for h in 0..n {
        let col = |m: &[f64], i: usize, e: usize| m[i * d + h * dh + e];
        for i in 0..s {
            for j in 0..s {
                let score = match cfg.variant {
                    Variant::Standard => (0..dh).map(|e| col(&feat_q, i, e) * col(&feat_k, j, e)).sum(),
                    Variant::Pseudo | Variant::Semi => {
                        let a = g("a");
                        let mut acc = 0.0;
                        for e1 in 0..dh {
                            for e2 in 0..dh {
                                acc += col(&feat_q, i, e1) * a[(h * dh + e1) * dh + e2] * col(&feat_k, j, e2);
                            }
                        }
                        acc
                    }
                    Variant::Gaussian => {
                        let two_sig2 = 2.0 * cfg.sigma * cfg.sigma;
                        let mut acc = 0.0;
                        for e1 in 0..dh {
                            for e2 in 0..dh {
                                let diff = col(&feat_q, i, e1) - col(&feat_k, j, e2);
                                acc += (-diff * diff / two_sig2).exp();
                            }
                        }
                        acc
                    }
                    Variant::LinearSim => {
                        // out[s, h'] = Σ_{r,e1,e2} x_s[e1] x_r[e2] W[h, h', r, e1, e2]
                        let w = g("w_inner");
                        let mut acc = 0.0;
                        for r in 0..s {
                            for e1 in 0..dh {
                                for e2 in 0..dh {
                                    acc += col(&feat_q, i, e1)
                                        * col(&feat_k, r, e2)
                                        * w[(((h * s + j) * s + r) * dh + e1) * dh + e2];
                                }
                            }
                        }
                        acc
                    }
                };
                maps[(h * s + i) * s + j] = score * scale;
            }
            softmax_row(&mut maps[(h * s + i) * s..(h * s + i + 1) * s]);
        }
    }
    let mut merged = vec![0.0; s * d];
    for h in 0..n {
        for i in 0..s {
            for e in 0..dh {
                merged[i * d + h * dh + e] = (0..s).map(|j| maps[(h * s + i) * s + j] * values[j * d + h * dh + e]).sum();
            }
        }
    }
    if cfg.variant == Variant::Semi {
        let wv = g("wv");
        let before = merged.clone();
        for h in 0..n {
            for i in 0..s {
                for e in 0..dh {
                    merged[i * d + h * dh + e] =
                        (0..dh).map(|k| before[i * d + h * dh + k] * wv[(h * dh + k) * dh + e]).sum();
                }
            }
        }
    }
    let out = match cfg.variant {
        Variant::Standard => affine(&merged, &g("wo"), &g("bo"), d, d),
        Variant::Semi => affine(&merged, &g("wo"), &g("b2"), d, d),
        _ => affine(&merged, &g("p"), &g("b2"), d, d),
    };
    (out, maps)
}

/// Largest relative error between reverse-mode gradients and central
/// differences, over every element of every input.
pub fn fd_max_rel_err(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input has a gradient");
        for j in 0..inp.numel() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = shifted.iter().map(|x| t.leaf(x.clone(), true)).collect();
                let l = f(&mut t, &vs);
                t.value(l).item().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}
