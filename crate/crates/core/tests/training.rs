use std::fs;
use std::path::Path;

use superkernel::app::{self, RunConfig};
use superkernel::params::ParamStore;
use superkernel::train::{
    adamw_step, cosine_warmup_lr, load_checkpoint, load_cifar10, read_cifar_batch, read_manifest, AdamState, AdamW,
    StepOutcome, CIFAR_RECORD,
};
use superkernel::{Error, Tensor};

#[test]
fn adamw_follows_the_written_out_recurrence() {
    let opt = AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 };
    let mut params = ParamStore::new();
    params.insert("w", Tensor::<f64>::new([3], vec![0.5, -1.0, 2.0]).unwrap());
    let mut state = AdamState::zeros_like(&params);
    let gs = [[0.1, -0.2, 0.3], [0.0, 0.5, -0.1], [1.0, 1.0, 1.0], [-0.3, 0.2, 0.05]];
    let lrs = [1e-2, 5e-3, 2e-3, 1e-3];

    let (mut p, mut m, mut v) = ([0.5, -1.0, 2.0], [0.0; 3], [0.0; 3]);
    for (t, (g, lr)) in gs.iter().zip(lrs).enumerate() {
        let mut grads = ParamStore::new();
        grads.insert("w", Tensor::new([3], g.to_vec()).unwrap());
        assert_eq!(adamw_step(&mut params, &grads, &mut state, &opt, lr).unwrap(), StepOutcome::Applied);
        let k = (t + 1) as i32;
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(k));
            let vh = v[i] / (1.0 - 0.95f64.powi(k));
            p[i] = p[i] - lr * 0.1 * p[i] - lr * mh / (vh.sqrt() + 1e-8);
        }
        let got = params.get("w").unwrap().data();
        for i in 0..3 {
            assert!((got[i] - p[i]).abs() < 1e-14, "step {k} elem {i}: {} vs {}", got[i], p[i]);
        }
    }
    assert_eq!(state.t, 4);

    let mut bad = ParamStore::new();
    bad.insert("w", Tensor::new([3], vec![0.0, f64::NAN, 0.0]).unwrap());
    let before = params.clone();
    assert_eq!(adamw_step(&mut params, &bad, &mut state, &opt, 1e-3).unwrap(), StepOutcome::Rejected);
    assert_eq!(params, before);
    assert_eq!((state.t, state.rejected), (4, 1));
}

#[test]
fn cosine_schedule_closed_form() {
    let (total, lr) = (200, 1e-3);
    // 5% warmup → 10 steps
    for s in 0..total {
        let want = if s < 10 {
            lr * s as f64 / 10.0
        } else {
            lr * 0.5 * (1.0 + (std::f64::consts::PI * (s - 10) as f64 / 190.0).cos())
        };
        assert!((cosine_warmup_lr(s, total, lr, 0.05) - want).abs() < 1e-15, "step {s}");
    }
    assert_eq!(cosine_warmup_lr(total, total, lr, 0.05), 0.0);
}

/// CIFAR-format records: label byte, then 1024 R, 1024 G, 1024 B bytes.
fn write_batch(path: &Path, labels: &[u8], seed: u8) -> Vec<Vec<u8>> {
    let mut bytes = Vec::new();
    let mut pixels = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let px: Vec<u8> = (0..3072).map(|k| ((k * 7 + i * 13 + seed as usize * 31) % 256) as u8).collect();
        bytes.push(l);
        bytes.extend(&px);
        pixels.push(px);
    }
    fs::write(path, bytes).unwrap();
    pixels
}

#[test]
fn cifar_binary_layout_and_train_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
    let mut train_px = Vec::new();
    for (i, n) in names.iter().enumerate() {
        train_px.extend(write_batch(&dir.path().join(n), &[i as u8, 9 - i as u8], i as u8));
    }
    write_batch(&dir.path().join("test_batch.bin"), &[3], 77);

    let one = read_cifar_batch(&dir.path().join(names[0])).unwrap();
    assert_eq!(one.images.shape(), &[2, 3, 32, 32]);
    assert_eq!(one.labels, vec![0, 9]);
    // channel-major planes: G plane starts 1024 bytes into the record
    assert_eq!(one.images.at(&[1, 1, 0, 5]), train_px[1][1024 + 5] as f32 / 255.0);

    let c = load_cifar10(dir.path()).unwrap();
    assert_eq!(c.train.len(), 10);
    assert_eq!(c.test.len(), 1);
    for ch in 0..3 {
        let vals: Vec<f64> =
            train_px.iter().flat_map(|p| p[ch * 1024..(ch + 1) * 1024].iter().map(|&b| (b as f32 / 255.0) as f64)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((c.standardization.mean[ch] - mean).abs() < 1e-9);
        assert!((c.standardization.std[ch] - std).abs() < 1e-9);
        let stats = c.train.channel_stats();
        assert!(stats.mean[ch].abs() < 1e-5 && (stats.std[ch] - 1.0).abs() < 1e-5);
    }
}

#[test]
fn cifar_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.bin");
    fs::write(&short, vec![0u8; CIFAR_RECORD + 5]).unwrap();
    let err = read_cifar_batch(&short).unwrap_err();
    assert!(matches!(err, Error::Dataset { .. }), "{err}");
    assert!(err.to_string().contains(&(2 * CIFAR_RECORD).to_string()), "{err}");

    let label = dir.path().join("label.bin");
    let mut rec = vec![0u8; CIFAR_RECORD];
    rec[0] = 10;
    fs::write(&label, rec).unwrap();
    assert!(matches!(read_cifar_batch(&label), Err(Error::Dataset { .. })));
    assert!(load_cifar10(dir.path()).is_err());
}

fn tiny_run(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut o: Vec<(String, String)> = vec![
        ("out".into(), format!("{:?}", out.to_string_lossy())),
        ("precision".into(), "\"f64\"".into()),
        ("data.train_size".into(), "40".into()),
        ("data.test_size".into(), "20".into()),
        ("pretrain.steps".into(), "6".into()),
        ("pretrain.batch_size".into(), "8".into()),
        ("pretrain.checkpoint_every".into(), "3".into()),
        ("finetune.train.steps".into(), "4".into()),
        ("finetune.train.batch_size".into(), "8".into()),
    ];
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::load(None, &o).unwrap()
}

#[test]
fn resumed_pretraining_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let s = app::pretrain(&tiny_run(&full, &[]), None).unwrap();
    assert_eq!(s.steps, 6);

    let metrics = fs::read_to_string(full.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,lr,loss,split"));
    assert_eq!(lines.count(), 6);
    let manifest = fs::read_to_string(full.join("run_manifest.toml")).unwrap();
    assert!(manifest.contains("exit_status"), "{manifest}");
    assert!(full.join("checkpoints/step_00000000").is_dir());

    let half = full.join("checkpoints/step_00000003");
    let resumed = dir.path().join("resumed");
    let resume = format!("{:?}", half.to_string_lossy());
    app::pretrain(&tiny_run(&resumed, &[("resume", &resume)]), None).unwrap();

    let a = load_checkpoint::<f64>(&full.join("checkpoints/step_00000006")).unwrap();
    let b = load_checkpoint::<f64>(&resumed.join("checkpoints/step_00000006")).unwrap();
    assert!(a.params().unwrap().bit_identical(b.params().unwrap()));
    assert_eq!(a.manifest.adam_t, b.manifest.adam_t);
}

#[test]
fn finetune_checks_the_backbone_and_trims_layers() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    app::pretrain(&tiny_run(&pre, &[]), None).unwrap();
    let ck = pre.join("checkpoints/step_00000006");
    let ck_str = format!("{:?}", ck.to_string_lossy());

    let ft = app::finetune(&tiny_run(&dir.path().join("ft"), &[("finetune.checkpoint", &ck_str), ("layers", "\"1\"")]), None)
        .unwrap();
    assert_eq!(ft.kept_layers, 1);
    assert_eq!(ft.test_examples, 20);
    assert!((0.0..=1.0).contains(&ft.test_accuracy));
    let metrics = fs::read_to_string(dir.path().join("ft/metrics.csv")).unwrap();
    assert!(metrics.lines().last().unwrap().ends_with(",test"));

    let wrong = tiny_run(&dir.path().join("bad"), &[("finetune.checkpoint", &ck_str), ("model.encoder.d_model", "24")]);
    match app::finetune(&wrong, None) {
        Err(Error::HashMismatch { checkpoint, config }) => {
            assert_eq!(checkpoint, read_manifest(&ck).unwrap().backbone_hash);
            assert_ne!(checkpoint, config);
        }
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
}
