use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{write_json, RunConfig, RunManifest};
use crate::model::{layer_prefix_surgery, Classifier, EncoderConfig, Mae};
use crate::train::{
    backbone_hash, evaluate_classifier, load_checkpoint, read_manifest, resume_from, train_loop, LoopOptions,
    TrainState, TrainSummary, METRICS_FILE,
};
use crate::{Error, Precision, Result, Scalar};

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub seconds: f64,
    pub last_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSummary {
    pub kept_layers: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub test_examples: usize,
    pub seconds: f64,
    pub last_checkpoint: Option<PathBuf>,
}

fn model_rng(seed: u64) -> ChaCha8Rng {
    // stream 0 is reserved for initialization; training steps use 1, 2, ...
    ChaCha8Rng::seed_from_u64(seed)
}

/// MAE pretraining on the configured training split.
pub fn pretrain(cfg: &RunConfig, config_path: Option<&Path>) -> Result<PretrainSummary> {
    let run = RunManifest::begin("pretrain", config_path, cfg)?;
    let out = match cfg.precision {
        Precision::F32 => pretrain_as::<f32>(cfg),
        Precision::F64 => pretrain_as::<f64>(cfg),
    };
    run.finish(if out.is_ok() { "ok" } else { "error" })?;
    out
}

fn pretrain_as<T: Scalar>(cfg: &RunConfig) -> Result<PretrainSummary> {
    let t0 = std::time::Instant::now();
    let data = cfg.load_data()?;
    let train = cfg.pretrain_config();
    let mut mae = Mae::<T>::init(cfg.model.clone(), &mut model_rng(cfg.seed))?;
    let mut state = match &cfg.resume {
        Some(dir) => resume_from(dir, &mut mae)?,
        None => TrainState::fresh(&mae.params),
    };
    let opts = LoopOptions {
        out_dir: Some(cfg.out.clone()),
        until: None,
        standardization: Some(data.standardization.clone()),
    };
    let s = train_loop(&train, &mut mae, &mut state, &data.train, &opts)?;
    let summary = PretrainSummary {
        initial_loss: s.first_loss(),
        final_loss: s.last_loss(),
        steps: s.end_step,
        seconds: t0.elapsed().as_secs_f64(),
        last_checkpoint: s.checkpoints.last().cloned(),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Number of leading blocks the finetune keeps.
fn kept_layers(cfg: &RunConfig, pretrained_layers: usize) -> Result<usize> {
    let keep = match &cfg.layers {
        Some(l) => l
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("finetune layers must be a block count, got `{l}`")))?,
        None => pretrained_layers.min(6),
    };
    if keep == 0 || keep > pretrained_layers {
        return Err(Error::Config(format!("cannot keep {keep} of {pretrained_layers} pretrained blocks")));
    }
    Ok(keep)
}

/// Classifier encoder built from the configured model, cut to `keep` blocks.
pub(crate) fn finetune_encoder(cfg: &RunConfig, keep: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: keep,
        dropout: cfg.finetune.dropout,
        mlp_dropout: cfg.finetune.dropout,
        ..cfg.model.encoder.clone()
    }
}

/// Loads the pretraining checkpoint, keeps its first blocks, attaches a
/// fresh linear head and trains on the labelled split.
pub fn finetune(cfg: &RunConfig, config_path: Option<&Path>) -> Result<FinetuneSummary> {
    let run = RunManifest::begin("finetune", config_path, cfg)?;
    let out = match cfg.precision {
        Precision::F32 => finetune_as::<f32>(cfg),
        Precision::F64 => finetune_as::<f64>(cfg),
    };
    run.finish(if out.is_ok() { "ok" } else { "error" })?;
    out
}

fn finetune_as<T: Scalar>(cfg: &RunConfig) -> Result<FinetuneSummary> {
    let t0 = std::time::Instant::now();
    let ck_dir = cfg
        .finetune
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("finetune.checkpoint is required".into()))?;
    let manifest = read_manifest(&ck_dir)?;
    let pretrained_layers = (0..)
        .take_while(|i| manifest.tensors.iter().any(|t| t.path.starts_with(&format!("encoder.blocks.{i}."))))
        .count();
    let keep = kept_layers(cfg, pretrained_layers.max(1))?;
    let enc = finetune_encoder(cfg, keep);
    let expected = backbone_hash(&enc)?;
    if manifest.backbone_hash != expected {
        return Err(Error::HashMismatch { checkpoint: manifest.backbone_hash, config: expected });
    }
    let ck = load_checkpoint::<T>(&ck_dir)?;
    let encoder = layer_prefix_surgery(ck.params()?, keep)?;
    let mut rng = model_rng(cfg.seed);
    let mut clf = Classifier::<T>::from_encoder(enc, cfg.finetune.n_classes, &encoder, &mut rng)?;

    let data = cfg.load_data()?;
    let train = cfg.finetune_config();
    let mut state = match &cfg.resume {
        Some(dir) => resume_from(dir, &mut clf)?,
        None => TrainState::fresh(&clf.params),
    };
    let opts = LoopOptions {
        out_dir: Some(cfg.out.clone()),
        until: None,
        standardization: Some(data.standardization.clone()),
    };
    let s: TrainSummary = train_loop(&train, &mut clf, &mut state, &data.train, &opts)?;
    let (acc, test_loss) = evaluate_classifier(&clf, &data.test, train.batch_size)?;
    append_eval_row(&cfg.out, s.end_step, test_loss)?;
    let summary = FinetuneSummary {
        kept_layers: keep,
        initial_loss: s.first_loss(),
        final_loss: s.last_loss(),
        steps: s.end_step,
        test_accuracy: acc,
        test_loss,
        test_examples: data.test.len(),
        seconds: t0.elapsed().as_secs_f64(),
        last_checkpoint: s.checkpoints.last().cloned(),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn append_eval_row(out: &Path, step: usize, loss: f64) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).create(true).open(out.join(METRICS_FILE))?;
    writeln!(f, "{step},0e0,{loss:e},test")?;
    Ok(())
}
