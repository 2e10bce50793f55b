mod common;

use common::{fd_max_rel_err, randn, rng};
use superkernel::attention::{attention_on_tape, AttentionConfig, AttentionParams, Variant};
use superkernel::model::{Classifier, EncoderConfig, Mae, MaeConfig};
use superkernel::params::{Bound, ParamStore};
use superkernel::train::{Batch, Trainable};
use superkernel::{KernelSpec, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

/// Reduces a tensor-valued node to a scalar with fixed random weights, so
/// every output element contributes a distinct gradient.
fn weigh(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = randn(tape.shape(y), seed);
    let wy = tape.mul_const(y, w).unwrap();
    tape.sum(wy)
}

fn assert_fd(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let err = fd_max_rel_err(inputs, f);
    assert!(err <= TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    let (a, b) = (randn(&[3, 4], 1), randn(&[3, 4], 2));
    assert_fd("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("scale", std::slice::from_ref(&a), |t, v| {
        let y = t.scale(v[0], -0.7);
        weigh(t, y, 9)
    });
    assert_fd("mul_const", std::slice::from_ref(&a), |t, v| {
        let y = t.mul_const(v[0], randn(&[3, 4], 4)).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("add_broadcast", &[a, randn(&[4], 3)], |t, v| {
        let y = t.add_broadcast(v[0], v[1]).unwrap();
        weigh(t, y, 9)
    });
}

#[test]
fn products_and_contractions() {
    assert_fd("matmul", &[randn(&[2, 3, 4], 1), randn(&[4, 5], 2)], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("contract", &[randn(&[2, 3, 4], 1), randn(&[3, 4, 2], 2)], |t, v| {
        let y = t.contract(v[0], v[1], "bij,ijk->bk").unwrap();
        weigh(t, y, 9)
    });
    assert_fd("contract repeated operand", &[randn(&[2, 3, 4], 5)], |t, v| {
        let y = t.contract(v[0], v[0], "bsd,brd->bsr").unwrap();
        weigh(t, y, 9)
    });
}

#[test]
fn shape_ops() {
    let x = randn(&[2, 3, 4], 1);
    assert_fd("reshape", std::slice::from_ref(&x), |t, v| {
        let y = t.reshape(v[0], &[6, 4]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("permute", std::slice::from_ref(&x), |t, v| {
        let y = t.permute(v[0], &[2, 0, 1]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("concat", &[x.clone(), randn(&[2, 1, 4], 2)], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("tile", &[randn(&[3, 4], 3)], |t, v| {
        let y = t.tile(v[0], &[2]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("gather_rows", &[x], |t, v| {
        let y = t.gather_rows(v[0], vec![vec![2, 0], vec![1, 1]]).unwrap();
        weigh(t, y, 9)
    });
}

#[test]
fn nonlinearities_and_norms() {
    let x = randn(&[2, 3, 5], 1);
    assert_fd("softmax", std::slice::from_ref(&x), |t, v| {
        let y = t.softmax(v[0]).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("gelu", std::slice::from_ref(&x), |t, v| {
        let y = t.gelu(v[0]);
        weigh(t, y, 9)
    });
    assert_fd("layer_norm", &[x.clone(), randn(&[5], 2), randn(&[5], 3)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        weigh(t, y, 9)
    });
    assert_fd("dropout", &[x], |t, v| {
        let y = t.dropout(v[0], 0.3, &mut rng(4)).unwrap();
        weigh(t, y, 9)
    });
}

#[test]
fn kernel_scores_for_each_kernel() {
    let x = randn(&[1, 2, 3, 2], 1).map(|v| 0.4 * v);
    let kernels = [
        KernelSpec::Linear,
        KernelSpec::gaussian(0.9).unwrap(),
        KernelSpec::bspline(vec![-2.0, -1.2, -0.5, 0.1, 0.6, 1.3, 2.0], 2).unwrap(),
    ];
    for k in kernels {
        assert_fd(k.name(), std::slice::from_ref(&x), |t, v| {
            let y = t.kernel_scores(v[0], &k).unwrap();
            weigh(t, y, 9)
        });
    }
}

#[test]
fn losses() {
    assert_fd("mse", &[randn(&[3, 4], 1)], |t, v| t.mse(v[0], randn(&[3, 4], 2)).unwrap());
    assert_fd("cross_entropy", &[randn(&[4, 3], 1)], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
}

/// Analytic parameter gradients of `loss` against central differences on a
/// sample of elements from every tensor.
fn param_fd_err(params: &ParamStore<f64>, per_tensor: usize, loss: impl Fn(&mut Tape<f64>, &Bound) -> Var) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let l = loss(&mut tape, &bound);
    let grads = tape.backward(l).unwrap();
    let analytic = bound.grads(&tape, &grads);
    let h = 1e-5;
    let value = |p: &ParamStore<f64>| {
        let mut t = Tape::new();
        let b = p.bind(&mut t, true);
        let l = loss(&mut t, &b);
        t.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (path, t) in params.iter() {
        let n = t.numel();
        for j in (0..n).step_by((n / per_tensor).max(1)) {
            let mut plus = params.clone();
            plus.get_mut(path).unwrap().data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(path).unwrap().data_mut()[j] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            let an = analytic.get(path).unwrap().data()[j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn attention_block_plus_mse_every_variant() {
    let (s, d) = (4, 6);
    for v in Variant::ALL {
        let mut cfg = AttentionConfig::new(v, d, 2);
        if v == Variant::LinearSim {
            cfg = cfg.with_seq_len(s);
        }
        let p = AttentionParams::<f64>::init(cfg.clone(), &mut rng(1)).unwrap();
        let x = randn(&[2, s, d], 2);
        let target = randn(&[2, s, d], 3);
        let err = param_fd_err(&p.store, 12, |tape, bound| {
            let xv = tape.constant(x.clone());
            let tr = attention_on_tape(tape, &cfg, bound, "", xv).unwrap();
            tape.mse(tr.out, target.clone()).unwrap()
        });
        assert!(err <= TOL, "{v} parameters: {err:e}");
        // and with respect to the input
        let store = p.store.clone();
        let err = fd_max_rel_err(std::slice::from_ref(&x), |tape, vars| {
            let bound = store.bind(tape, false);
            let tr = attention_on_tape(tape, &cfg, &bound, "", vars[0]).unwrap();
            tape.mse(tr.out, target.clone()).unwrap()
        });
        assert!(err <= TOL, "{v} input: {err:e}");
    }
}

fn tiny_encoder(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        mlp_dim: 12,
        n_layers: 1,
        n_heads: 2,
        patch_size: 2,
        image_size: 4,
        dropout: 0.1,
        mlp_dropout: 0.1,
        ..EncoderConfig::paper(variant, 8, 2)
    }
}

#[test]
fn full_mae_loss_pseudo() {
    let enc = tiny_encoder(Variant::Pseudo);
    let cfg = MaeConfig { decoder: enc.clone(), encoder: enc, mask_ratio: 0.5 };
    let mae = Mae::<f64>::init(cfg, &mut rng(7)).unwrap();
    let batch = Batch { images: randn(&[2, 3, 4, 4], 8), labels: vec![0, 1] };
    let err = param_fd_err(&mae.params, 6, |tape, bound| {
        mae.loss_on_tape(tape, bound, &batch, &mut rng(11)).unwrap()
    });
    assert!(err <= TOL, "mae: {err:e}");
}

#[test]
fn full_classifier_loss_semi() {
    let clf = Classifier::<f64>::init(tiny_encoder(Variant::Semi), 3, &mut rng(7)).unwrap();
    let batch = Batch { images: randn(&[3, 3, 4, 4], 8), labels: vec![0, 2, 1] };
    let err = param_fd_err(&clf.params, 6, |tape, bound| {
        clf.loss_on_tape(tape, bound, &batch, &mut rng(11)).unwrap()
    });
    assert!(err <= TOL, "classifier: {err:e}");
}
