//! One line per acceptance criterion. Criteria whose inputs are missing
//! from this machine (the CIFAR-10 binaries) are printed as FAIL with the
//! reason and do not abort the run; every evaluated criterion must pass.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::{fd_max_rel_err, randn, rng};
use superkernel::app::{self, run_suites, BenchStatus, RunConfig, Suite};
use superkernel::attention::{attention_on_tape, AttentionConfig, AttentionParams, Variant};
use superkernel::kernels::kernel_tensor_bytes;
use superkernel::params::Bound;
use superkernel::{KernelSpec, Precision, Tape, Var};

enum Outcome {
    Pass,
    Fail,
    /// Could not be evaluated here; reported as FAIL.
    Unavailable,
}

struct Line {
    id: &'static str,
    outcome: Outcome,
    detail: String,
    seconds: f64,
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn quoted(p: &Path) -> String {
    format!("{:?}", p.to_string_lossy())
}

fn suite_line(id: &'static str, suites: &[(Suite, Precision)], budget_s: Option<f64>) -> Line {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for &(suite, precision) in suites {
        match run_suites(&[suite], precision, 0) {
            Ok(report) => {
                for c in report.checks {
                    ok &= c.pass;
                    parts.push(format!("{}[{precision}]={:.3e}{}", c.name, c.measured, if c.pass { "" } else { " (!)" }));
                }
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{suite}: error {e}"));
            }
        }
    }
    let seconds = t.elapsed().as_secs_f64();
    if let Some(b) = budget_s {
        ok &= seconds <= b;
        parts.push(format!("runtime budget {b} s"));
    }
    Line { id, outcome: if ok { Outcome::Pass } else { Outcome::Fail }, detail: parts.join("; "), seconds }
}

fn weigh(tape: &mut Tape<f64>, y: Var) -> Var {
    let w = randn(tape.shape(y), 99);
    let wy = tape.mul_const(y, w).unwrap();
    tape.sum(wy)
}

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

fn gradients() -> Line {
    let t = Instant::now();
    let x = randn(&[2, 3, 4], 1);
    let m = randn(&[3, 4], 2);
    let bs = KernelSpec::bspline(vec![-2.0, -1.2, -0.5, 0.1, 0.6, 1.3, 2.0], 2).unwrap();
    let cases: Vec<(&str, Vec<_>, Graph)> = vec![
        ("add", vec![m.clone(), randn(&[3, 4], 3)], Box::new(|t, v| { let y = t.add(v[0], v[1]).unwrap(); weigh(t, y) })),
        ("sub", vec![m.clone(), randn(&[3, 4], 3)], Box::new(|t, v| { let y = t.sub(v[0], v[1]).unwrap(); weigh(t, y) })),
        ("mul", vec![m.clone(), randn(&[3, 4], 3)], Box::new(|t, v| { let y = t.mul(v[0], v[1]).unwrap(); weigh(t, y) })),
        ("scale", vec![m.clone()], Box::new(|t, v| { let y = t.scale(v[0], 1.7); weigh(t, y) })),
        ("mul_const", vec![m.clone()], Box::new(|t, v| { let y = t.mul_const(v[0], randn(&[3, 4], 4)).unwrap(); weigh(t, y) })),
        ("add_broadcast", vec![m.clone(), randn(&[4], 5)], Box::new(|t, v| { let y = t.add_broadcast(v[0], v[1]).unwrap(); weigh(t, y) })),
        ("matmul", vec![x.clone(), randn(&[4, 2], 6)], Box::new(|t, v| { let y = t.matmul(v[0], v[1]).unwrap(); weigh(t, y) })),
        ("contract", vec![x.clone(), randn(&[3, 4, 2], 7)], Box::new(|t, v| { let y = t.contract(v[0], v[1], "bij,ijk->bk").unwrap(); weigh(t, y) })),
        ("reshape", vec![x.clone()], Box::new(|t, v| { let y = t.reshape(v[0], &[6, 4]).unwrap(); weigh(t, y) })),
        ("permute", vec![x.clone()], Box::new(|t, v| { let y = t.permute(v[0], &[2, 0, 1]).unwrap(); weigh(t, y) })),
        ("concat", vec![x.clone(), randn(&[2, 1, 4], 8)], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], 1).unwrap(); weigh(t, y) })),
        ("tile", vec![m.clone()], Box::new(|t, v| { let y = t.tile(v[0], &[2]).unwrap(); weigh(t, y) })),
        ("gather_rows", vec![x.clone()], Box::new(|t, v| { let y = t.gather_rows(v[0], vec![vec![2, 0], vec![1, 1]]).unwrap(); weigh(t, y) })),
        ("softmax", vec![x.clone()], Box::new(|t, v| { let y = t.softmax(v[0]).unwrap(); weigh(t, y) })),
        ("gelu", vec![x.clone()], Box::new(|t, v| { let y = t.gelu(v[0]); weigh(t, y) })),
        ("layer_norm", vec![x.clone(), randn(&[4], 9), randn(&[4], 10)], Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(); weigh(t, y) })),
        ("dropout", vec![x.clone()], Box::new(|t, v| { let y = t.dropout(v[0], 0.25, &mut rng(3)).unwrap(); weigh(t, y) })),
        ("kernel_scores linear", vec![x.clone()], Box::new(|t, v| { let y = t.kernel_scores(v[0], &KernelSpec::Linear).unwrap(); weigh(t, y) })),
        ("kernel_scores gaussian", vec![x.clone()], Box::new(|t, v| { let y = t.kernel_scores(v[0], &KernelSpec::Gaussian { sigma: 1.1 }).unwrap(); weigh(t, y) })),
        ("kernel_scores bspline", vec![x.map(|v| 0.4 * v)], Box::new(move |t, v| { let y = t.kernel_scores(v[0], &bs).unwrap(); weigh(t, y) })),
        ("mse", vec![m.clone()], Box::new(|t, v| t.mse(v[0], randn(&[3, 4], 11)).unwrap())),
        ("cross_entropy", vec![randn(&[4, 3], 12)], Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap())),
    ];
    let mut worst = (0.0f64, "");
    for (name, inputs, f) in &cases {
        let e = fd_max_rel_err(inputs, f);
        if e > worst.0 {
            worst = (e, name);
        }
    }

    // full pseudo block + MSE, differentiated with respect to every weight and the input
    let cfg = AttentionConfig::new(Variant::Pseudo, 8, 2);
    let p = AttentionParams::<f64>::init(cfg.clone(), &mut rng(1)).unwrap();
    let roles: Vec<String> = p.store.paths().map(str::to_string).collect();
    let mut inputs: Vec<_> = roles.iter().map(|r| p.store.get(r).unwrap().clone()).collect();
    inputs.push(randn(&[2, 5, 8], 2));
    let target = randn(&[2, 5, 8], 3);
    let path_err = fd_max_rel_err(&inputs, |tape, vars| {
        let bound: Bound = roles.iter().cloned().zip(vars.iter().copied()).collect();
        let tr = attention_on_tape(tape, &cfg, &bound, "", vars[roles.len()]).unwrap();
        tape.mse(tr.out, target.clone()).unwrap()
    });
    let ok = worst.0 <= 1e-4 && path_err <= 1e-4;
    Line {
        id: "6",
        outcome: if ok { Outcome::Pass } else { Outcome::Fail },
        detail: format!(
            "{} ops, worst rel err {:.2e} ({}); pseudo block + MSE rel err {:.2e}; tolerance 1e-4",
            cases.len(),
            worst.0,
            worst.1,
            path_err
        ),
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn last_mean_loss(metrics: &Path, last: usize) -> (f64, f64) {
    let text = fs::read_to_string(metrics).unwrap();
    let losses: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",train"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let tail = &losses[losses.len().saturating_sub(last)..];
    (losses[0], tail.iter().sum::<f64>() / tail.len() as f64)
}

fn tiny_mae(tmp: &Path) -> Line {
    let t = Instant::now();
    let out = tmp.join("tiny");
    let cfg = RunConfig::load(Some(&root().join("configs/tiny.toml")), &[("out".into(), quoted(&out))]).unwrap();
    let res = app::pretrain(&cfg, None);
    let seconds = t.elapsed().as_secs_f64();
    match res {
        Ok(s) => {
            let (first, tail) = last_mean_loss(&out.join("metrics.csv"), 10);
            let ratio = tail / first;
            let ok = s.steps == 200 && ratio <= 0.5 && seconds <= 120.0;
            Line {
                id: "8a",
                outcome: if ok { Outcome::Pass } else { Outcome::Fail },
                detail: format!(
                    "tiny MAE, {} steps: loss {first:.4} -> {tail:.4} (mean of last 10), ratio {ratio:.3} <= 0.5; budget 120 s",
                    s.steps
                ),
                seconds,
            }
        }
        Err(e) => Line { id: "8a", outcome: Outcome::Fail, detail: format!("error: {e}"), seconds },
    }
}

/// Pretraining for zero steps writes a randomly initialized checkpoint, so
/// the finetune stage starts from scratch.
fn from_scratch_finetune(tmp: &Path, name: &str, extra: &[(&str, String)]) -> superkernel::Result<app::FinetuneSummary> {
    let mut o: Vec<(String, String)> = vec![("out".into(), quoted(&tmp.join(name).join("init"))), ("pretrain.steps".into(), "0".into())];
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let desk = root().join("configs/desk.toml");
    let init = app::pretrain(&RunConfig::load(Some(&desk), &o)?, None)?;
    let ck = init.last_checkpoint.expect("step-0 checkpoint");
    o[0] = ("out".into(), quoted(&tmp.join(name).join("finetune")));
    o.push(("finetune.checkpoint".into(), quoted(&ck)));
    app::finetune(&RunConfig::load(Some(&desk), &o)?, None)
}

fn cifar_dir() -> Option<PathBuf> {
    let candidates = [std::env::var_os("CIFAR10_DIR").map(PathBuf::from), Some(root().join("data/cifar-10-batches-bin"))];
    candidates.into_iter().flatten().find(|d| d.join("data_batch_1.bin").is_file() && d.join("test_batch.bin").is_file())
}

fn cifar_finetune(tmp: &Path) -> Line {
    let Some(dir) = cifar_dir() else {
        return Line {
            id: "8b",
            outcome: Outcome::Unavailable,
            detail: "not evaluated: CIFAR-10 binaries not found (set CIFAR10_DIR or populate data/cifar-10-batches-bin)".into(),
            seconds: 0.0,
        };
    };
    let t = Instant::now();
    let res = from_scratch_finetune(tmp, "cifar", &[("data.dir", quoted(&dir))]);
    let seconds = t.elapsed().as_secs_f64();
    match res {
        Ok(s) => {
            let ok = s.test_accuracy > 0.30 && seconds <= 600.0;
            Line {
                id: "8b",
                outcome: if ok { Outcome::Pass } else { Outcome::Fail },
                detail: format!(
                    "CIFAR-10 1k/1k from scratch, {} steps: held-out accuracy {:.3} > 0.30; budget 600 s",
                    s.steps, s.test_accuracy
                ),
                seconds,
            }
        }
        Err(e) => Line { id: "8b", outcome: Outcome::Fail, detail: format!("error: {e}"), seconds },
    }
}

fn synthetic_proxy(tmp: &Path) -> String {
    let t = Instant::now();
    let res = from_scratch_finetune(
        tmp,
        "proxy",
        &[("data.source", "\"synthetic\"".into()), ("finetune.train.steps", "150".into())],
    );
    match res {
        Ok(s) => format!(
            "[INFO] 8b-proxy synthetic 32px shapes 1k/1k from scratch, {} steps: held-out accuracy {:.3} ({:.1} s); not a substitute for CIFAR-10",
            s.steps,
            s.test_accuracy,
            t.elapsed().as_secs_f64()
        ),
        Err(e) => format!("[INFO] 8b-proxy error: {e}"),
    }
}

fn probe(tmp: &Path) -> Line {
    let t = Instant::now();
    let run = || -> superkernel::Result<(f64, f64)> {
        let mut worst_rows = 0.0f64;
        let mut asym = 0.0;
        for variant in ["gaussian", "pseudo"] {
            let v = format!("{variant:?}");
            let base = vec![
                ("model.encoder.variant".to_string(), v.clone()),
                ("model.decoder.variant".to_string(), v),
                ("data.train_size".into(), "200".into()),
                ("pretrain.steps".into(), "20".into()),
                ("pretrain.batch_size".into(), "50".into()),
            ];
            let mut o = base.clone();
            o.push(("out".into(), quoted(&tmp.join(variant).join("pre"))));
            let pre = app::pretrain(&RunConfig::load(None, &o)?, None)?;
            let mut o = base;
            o.push(("out".into(), quoted(&tmp.join(variant).join("probe"))));
            o.push(("probe.checkpoint".into(), quoted(&pre.last_checkpoint.unwrap())));
            o.push(("probe.count".into(), "4".into()));
            o.push(("probe.raw_scores".into(), "true".into()));
            let s = app::probe(&RunConfig::load(None, &o)?, None)?;
            worst_rows = worst_rows.max(s.max_row_sum_error);
            if variant == "gaussian" {
                asym = s.max_raw_asymmetry.unwrap_or(f64::INFINITY);
            }
        }
        Ok((worst_rows, asym))
    };
    match run() {
        Ok((rows, asym)) => {
            let seconds = t.elapsed().as_secs_f64();
            let ok = rows <= 1e-4 && asym <= 1e-4;
            Line {
                id: "9",
                outcome: if ok { Outcome::Pass } else { Outcome::Fail },
                detail: format!("max |row sum - 1| {rows:.2e} <= 1e-4; Gaussian raw score asymmetry {asym:.2e} <= 1e-4"),
                seconds,
            }
        }
        Err(e) => Line { id: "9", outcome: Outcome::Fail, detail: format!("error: {e}"), seconds: t.elapsed().as_secs_f64() },
    }
}

fn bench(tmp: &Path) -> Line {
    let t = Instant::now();
    let o = vec![
        ("out".to_string(), quoted(&tmp.join("bench"))),
        ("precision".into(), "\"f32\"".into()),
        ("bench.grid".into(), "[[1, 4, 4], [2, 8, 8], [2, 16, 16], [4, 64, 256]]".into()),
        ("bench.budget_bytes".into(), (2u64 << 30).to_string()),
        ("bench.reps".into(), "3".into()),
    ];
    let rows = match RunConfig::load(None, &o).and_then(|c| app::bench(&c, None)) {
        Ok(r) => r,
        Err(e) => return Line { id: "10", outcome: Outcome::Fail, detail: format!("error: {e}"), seconds: 0.0 },
    };
    let expect = 4u128 * 64 * 64 * 256 * 256 * 4;
    let refused = rows.iter().find(|r| (r.b, r.s, r.d) == (4, 64, 256) && r.mode == "materialized");
    let refused_ok = refused.is_some_and(|r| {
        r.status == BenchStatus::Refused
            && r.estimate_bytes == expect
            && r.estimate_bytes >= r.budget_bytes
            && r.estimate_bytes == kernel_tensor_bytes::<f32>(4, 64, 64, 256)
    });
    let small_diff = rows
        .iter()
        .filter(|r| r.mode == "streamed" && r.s <= 16)
        .map(|r| r.max_abs_diff.unwrap_or(f64::INFINITY))
        .fold(0.0f64, f64::max);
    let streamed_ok = rows.iter().filter(|r| r.mode == "streamed").all(|r| r.status == BenchStatus::Ok && r.samples_ms.len() == 3);
    let ok = refused_ok && streamed_ok && small_diff <= 1e-5;
    Line {
        id: "10",
        outcome: if ok { Outcome::Pass } else { Outcome::Fail },
        detail: format!(
            "B=4,S=64,D=256 materialized {:?} estimate {} bytes (expected {expect}, budget {}); streamed rows complete {streamed_ok}; small-extent streamed vs materialized max diff {small_diff:.2e} <= 1e-5 (f32)",
            refused.map(|r| r.status),
            refused.map_or(0, |r| r.estimate_bytes),
            2u64 << 30
        ),
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let f64_ = Precision::F64;
    let lines = vec![
        suite_line("1", &[(Suite::Embed, f64_), (Suite::Embed, Precision::F32)], Some(60.0)),
        suite_line("2", &[(Suite::Superposition, f64_)], Some(60.0)),
        suite_line("3", &[(Suite::Conv, f64_)], None),
        suite_line("4", &[(Suite::Params, f64_)], None),
        suite_line("5", &[(Suite::Variance, f64_)], Some(60.0)),
        gradients(),
        suite_line("7", &[(Suite::Bspline, f64_)], None),
        tiny_mae(tmp.path()),
        cifar_finetune(tmp.path()),
        probe(tmp.path()),
        bench(tmp.path()),
    ];
    let mut failed = 0;
    let mut unavailable = 0;
    for l in &lines {
        let tag = match l.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => {
                failed += 1;
                "FAIL"
            }
            Outcome::Unavailable => {
                unavailable += 1;
                "FAIL"
            }
        };
        println!("[{tag}] criterion {:<3} {:>7.2} s  {}", l.id, l.seconds, l.detail);
    }
    println!("{}", synthetic_proxy(tmp.path()));
    let passed = lines.len() - failed - unavailable;
    println!("acceptance: {passed}/{} pass, {failed} failed, {unavailable} not evaluable here", lines.len());
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
