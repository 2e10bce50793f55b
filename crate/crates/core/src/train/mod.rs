//! Optimizer, schedule, datasets, checkpoints and the pretrain/finetune loop.

mod checkpoint;
mod data;
mod optim;
mod schedule;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::model::{classify_on_tape, mae_mask, mae_on_tape, Classifier, EncoderConfig, Mae};
use crate::params::{Bound, ParamStore};
use crate::{Error, Precision, Result, Scalar};

pub use checkpoint::{
    config_hash, from_table, load_checkpoint, read_manifest, save_checkpoint, to_table, Checkpoint, Manifest, RngState,
    TensorRecord, GROUP_ADAM_M, GROUP_ADAM_V, GROUP_PARAMS, MANIFEST_FILE, PARAMS_FILE,
};
pub use data::{
    load_cifar10, read_cifar_batch, standardized, synthetic_dataset, Batch, Cifar10, Dataset, Standardization,
    CIFAR_RECORD,
};
pub use optim::{adamw_step, clip_grad_norm, AdamState, AdamW, StepOutcome};
pub use schedule::cosine_warmup_lr;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,lr,loss,split";

fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}

/// Optimization hyperparameters and run length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` as the schedule length when set.
    pub steps: Option<usize>,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Checkpoint every this many steps, plus the first and last.
    pub checkpoint_every: Option<usize>,
    /// Global gradient-norm cap; off unless set.
    pub grad_clip: Option<f64>,
    /// Random horizontal flips.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            betas: default_betas(),
            eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 100,
            epochs: 1600,
            steps: None,
            warmup_ratio: 0.05,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: None,
            grad_clip: None,
            hflip: false,
        }
    }

    pub fn finetune() -> Self {
        Self { epochs: 800, hflip: true, ..Self::pretrain() }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { beta1: self.betas[0], beta2: self.betas[1], eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if self.checkpoint_every == Some(0) || self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("checkpoint_every and grad_clip must be positive when set".into());
        }
        Ok(())
    }

    /// Effective batch for `n` examples.
    pub fn batch_for(&self, n: usize) -> usize {
        self.batch_size.min(n).max(1)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_for(n)).max(1)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(n))
    }
}

/// Shape-determining encoder fields; depth and regularization excluded so an
/// 8-layer pretrained encoder matches a 6-layer finetune config.
pub fn backbone_hash(enc: &EncoderConfig) -> Result<String> {
    config_hash(&(
        enc.d_model,
        enc.mlp_dim,
        enc.n_heads,
        enc.variant,
        enc.attention().scaling(),
        enc.sigma.to_bits(),
        enc.patch_size,
        enc.image_size,
        enc.channels,
        enc.with_class_token,
    ))
}

/// A model the loop can optimize.
pub trait Trainable<T: Scalar> {
    /// `mae` or `classifier`, recorded in checkpoints.
    fn kind(&self) -> &'static str;
    fn model_table(&self) -> Result<toml::Table>;
    fn arch_hash(&self) -> Result<String>;
    fn backbone_hash(&self) -> Result<String>;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Training-mode loss; all randomness comes from `rng`.
    fn loss_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, batch: &Batch<T>, rng: &mut ChaCha8Rng) -> Result<Var>;
}

impl<T: Scalar> Trainable<T> for Mae<T> {
    fn kind(&self) -> &'static str {
        "mae"
    }

    fn model_table(&self) -> Result<toml::Table> {
        to_table(&self.config)
    }

    fn arch_hash(&self) -> Result<String> {
        config_hash(&("mae", &self.config))
    }

    fn backbone_hash(&self) -> Result<String> {
        backbone_hash(&self.config.encoder)
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn loss_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, batch: &Batch<T>, rng: &mut ChaCha8Rng) -> Result<Var> {
        let s = self.config.encoder.num_patches();
        let masks = (0..batch.images.dim(0))
            .map(|_| mae_mask(s, self.config.mask_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(mae_on_tape(tape, &self.config, bound, &batch.images, &masks, Some(rng))?.loss)
    }
}

/// Snapshot of a classifier's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
}

impl<T: Scalar> Trainable<T> for Classifier<T> {
    fn kind(&self) -> &'static str {
        "classifier"
    }

    fn model_table(&self) -> Result<toml::Table> {
        to_table(&ClassifierArch { encoder: self.config.clone(), n_classes: self.n_classes })
    }

    fn arch_hash(&self) -> Result<String> {
        config_hash(&("classifier", &self.config, self.n_classes))
    }

    fn backbone_hash(&self) -> Result<String> {
        backbone_hash(&self.config)
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn loss_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, batch: &Batch<T>, rng: &mut ChaCha8Rng) -> Result<Var> {
        let (logits, _) = classify_on_tape(tape, &self.config, bound, &batch.images, Some(rng))?;
        tape.cross_entropy(logits, &batch.labels)
    }
}

/// Optimizer state and position of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub adam: AdamState<T>,
    /// Completed steps.
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(params: &ParamStore<T>) -> Self {
        Self { adam: AdamState::zeros_like(params), step: 0 }
    }
}

/// Where a run writes and how far it goes.
#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Directory for `metrics.csv` and `checkpoints/`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stop after this step even if the schedule is longer.
    pub until: Option<usize>,
    pub standardization: Option<Standardization>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub start_step: usize,
    pub end_step: usize,
    pub total_steps: usize,
    /// `(step, loss)` for every step run.
    pub losses: Vec<(usize, f64)>,
    pub rejected_steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainSummary {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().map(|l| l.1)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().map(|l| l.1)
    }
}

/// Per-step generator: a pure function of `(seed, step)`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Example indices of 1-based `step`.
pub fn batch_indices(cfg: &TrainConfig, data: &Dataset, step: usize) -> Vec<usize> {
    let n = data.len();
    let (bs, spe) = (cfg.batch_for(n), cfg.steps_per_epoch(n));
    let s = step - 1;
    let order = data.epoch_order(cfg.seed, (s / spe) as u64);
    let k = s % spe;
    order[k * bs..(k + 1) * bs].to_vec()
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:08}"))
}

/// Saves params, moments and position under `out/checkpoints/step_N`.
pub fn save_training_checkpoint<T: Scalar, M: Trainable<T>>(
    out: &Path,
    cfg: &TrainConfig,
    model: &M,
    state: &TrainState<T>,
    standardization: Option<&Standardization>,
) -> Result<PathBuf> {
    let manifest = Manifest {
        format: 0,
        kind: model.kind().into(),
        arch_hash: model.arch_hash()?,
        backbone_hash: model.backbone_hash()?,
        dtype: String::new(),
        step: state.step as u64,
        adam_t: state.adam.t,
        rejected_steps: state.adam.rejected,
        rng: RngState::new(cfg.seed, state.step as u64 + 1),
        model: model.model_table()?,
        train: Some(to_table(cfg)?),
        standardization: standardization.cloned(),
        tensors: vec![],
    };
    save_checkpoint(
        &checkpoint_dir(out, state.step),
        manifest,
        &[(GROUP_PARAMS, model.params()), (GROUP_ADAM_M, &state.adam.m), (GROUP_ADAM_V, &state.adam.v)],
    )
}

/// Restores params and optimizer state saved by [`save_training_checkpoint`];
/// refuses a checkpoint whose architecture hash differs from `model`'s.
pub fn resume_from<T: Scalar, M: Trainable<T>>(dir: &Path, model: &mut M) -> Result<TrainState<T>> {
    let ck = load_checkpoint::<T>(dir)?;
    let expected = model.arch_hash()?;
    if ck.manifest.arch_hash != expected {
        return Err(Error::HashMismatch { checkpoint: ck.manifest.arch_hash, config: expected });
    }
    let params = ck.params()?;
    for (path, dst) in model.params_mut().iter_mut() {
        let src = params.get(path)?;
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!("`{path}` shape {:?} != {:?}", src.shape(), dst.shape())));
        }
        *dst = src.clone();
    }
    let adam = AdamState {
        m: ck.group(GROUP_ADAM_M)?.clone(),
        v: ck.group(GROUP_ADAM_V)?.clone(),
        t: ck.manifest.adam_t,
        rejected: ck.manifest.rejected_steps,
    };
    Ok(TrainState { adam, step: ck.manifest.step as usize })
}

struct Metrics(Option<fs::File>);

impl Metrics {
    fn open(out: Option<&Path>) -> Result<Self> {
        let Some(out) = out else { return Ok(Self(None)) };
        fs::create_dir_all(out)?;
        let path = out.join(METRICS_FILE);
        let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{METRICS_HEADER}")?;
        }
        Ok(Self(Some(f)))
    }

    fn row(&mut self, step: usize, lr: f64, loss: f64, split: &str) -> Result<()> {
        if let Some(f) = &mut self.0 {
            writeln!(f, "{step},{lr:e},{loss:e},{split}")?;
        }
        Ok(())
    }
}

/// Runs steps `state.step + 1 ..= min(total, until)`. Each step draws its
/// batch from the epoch permutation, its masks, flips and dropout from
/// [`step_rng`], and applies one AdamW update at the scheduled rate.
pub fn train_loop<T: Scalar, M: Trainable<T>>(
    cfg: &TrainConfig,
    model: &mut M,
    state: &mut TrainState<T>,
    data: &Dataset,
    opts: &LoopOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let total = cfg.total_steps(data.len());
    let end = opts.until.map_or(total, |u| u.min(total));
    let opt = cfg.optimizer();
    let out = opts.out_dir.as_deref();
    let mut metrics = Metrics::open(out)?;
    let mut summary = TrainSummary {
        start_step: state.step,
        end_step: state.step,
        total_steps: total,
        losses: Vec::new(),
        rejected_steps: 0,
        checkpoints: Vec::new(),
    };
    let checkpoint = |model: &M, state: &TrainState<T>, summary: &mut TrainSummary| -> Result<()> {
        if let Some(out) = out {
            summary.checkpoints.push(save_training_checkpoint(out, cfg, model, state, opts.standardization.as_ref())?);
        }
        Ok(())
    };
    if state.step == 0 {
        checkpoint(model, state, &mut summary)?;
    }
    let mut bad_losses = 0;
    while state.step < end {
        let step = state.step + 1;
        let lr = cosine_warmup_lr(step - 1, total, cfg.lr, cfg.warmup_ratio);
        let mut rng = step_rng(cfg.seed, step);
        let idx = batch_indices(cfg, data, step);
        let flips: Option<Vec<bool>> = cfg.hflip.then(|| idx.iter().map(|_| rng.random::<bool>()).collect());
        let batch = data.batch::<T>(&idx, flips.as_deref());

        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, true);
        let loss_var = model.loss_on_tape(&mut tape, &bound, &batch, &mut rng)?;
        let loss = tape.value(loss_var).item()?.f64();
        metrics.row(step, lr, loss, "train")?;
        summary.losses.push((step, loss));
        if loss.is_finite() {
            bad_losses = 0;
            let mut grads = bound.grads(&tape, &tape.backward(loss_var)?);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(model.params_mut(), &grads, &mut state.adam, &opt, lr)?;
        } else {
            bad_losses += 1;
            state.adam.rejected += 1;
            log::warn!("non-finite loss {loss} at step {step}; update skipped");
            if bad_losses >= 2 {
                return Err(Error::TrainingAborted {
                    step,
                    reason: format!("loss was non-finite on two consecutive steps (last {loss}, lr {lr:e})"),
                });
            }
        }
        state.step = step;
        if cfg.checkpoint_every.is_some_and(|k| step.is_multiple_of(k)) || step == end {
            checkpoint(model, state, &mut summary)?;
        }
    }
    summary.end_step = state.step;
    summary.rejected_steps = state.adam.rejected;
    Ok(summary)
}

/// Accuracy and mean cross-entropy of `clf` on `data`, in evaluation mode.
pub fn evaluate_classifier<T: Scalar>(clf: &Classifier<T>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = data.batch::<T>(chunk, None);
        let mut tape = Tape::new();
        let bound = clf.params.bind(&mut tape, false);
        let (logits, _) = classify_on_tape(&mut tape, &clf.config, &bound, &b.images, None)?;
        let ce = tape.cross_entropy(logits, &b.labels)?;
        loss += tape.value(ce).item()?.f64() * chunk.len() as f64;
        let l = tape.value(logits);
        let k = clf.n_classes;
        for (row, &label) in l.data().chunks(k).zip(&b.labels) {
            let arg = row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            correct += usize::from(arg == label);
        }
    }
    let n = data.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}
