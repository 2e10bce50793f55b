use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{write_json, RunConfig, RunManifest};
use crate::autograd::Tape;
use crate::model::{encoder_on_tape, patch_embed_on_tape, EncoderConfig, MaeConfig};
use crate::train::{
    from_table, load_checkpoint, read_cifar_batch, read_manifest, synthetic_dataset, ClassifierArch, Dataset, Manifest,
};
use crate::{Error, Result, Scalar};

/// 1-based layer selection: `all`, `k`, `a-b`, or a comma list of those.
/// Returns 0-based indices.
pub fn parse_layers(spec: Option<&str>, n_layers: usize) -> Result<Vec<usize>> {
    let spec = spec.map(str::trim).unwrap_or("all");
    if spec == "all" {
        return Ok((0..n_layers).collect());
    }
    let num = |s: &str| -> Result<usize> {
        let k: usize = s.trim().parse().map_err(|_| Error::invalid(format!("bad layer `{s}` in `{spec}`")))?;
        if k == 0 || k > n_layers {
            return Err(Error::invalid(format!("layer index {k} out of range 1..={n_layers}")));
        }
        Ok(k - 1)
    };
    let mut out = Vec::new();
    for part in spec.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(Error::invalid(format!("empty layer range `{part}`")));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub checkpoint: PathBuf,
    pub variant: String,
    /// 1-based layers written.
    pub layers: Vec<usize>,
    pub images: usize,
    pub files: usize,
    /// Largest `|row sum - 1|` over every written map.
    pub max_row_sum_error: f64,
    /// Largest `|S - Sᵀ|` over the dumped raw scores, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_raw_asymmetry: Option<f64>,
}

fn encoder_of(manifest: &Manifest) -> Result<EncoderConfig> {
    match manifest.kind.as_str() {
        "mae" => Ok(from_table::<MaeConfig>(&manifest.model)?.encoder),
        "classifier" => Ok(from_table::<ClassifierArch>(&manifest.model)?.encoder),
        other => Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
    }
}

/// Writes per-head and head-averaged attention maps for the selected layers
/// under `out/probe/`.
pub fn probe(cfg: &RunConfig, config_path: Option<&Path>) -> Result<ProbeSummary> {
    let ck = cfg.probe.checkpoint.clone().ok_or_else(|| Error::Config("probe.checkpoint is required".into()))?;
    let manifest = read_manifest(&ck)?;
    let enc = encoder_of(&manifest)?;
    let layers = parse_layers(cfg.layers.as_deref(), enc.n_layers)?;
    let run = RunManifest::begin("probe", config_path, cfg)?;
    let out = match manifest.dtype.as_str() {
        "f64" => probe_as::<f64>(cfg, &ck, &manifest, &enc, &layers),
        _ => probe_as::<f32>(cfg, &ck, &manifest, &enc, &layers),
    };
    run.finish(if out.is_ok() { "ok" } else { "error" })?;
    out
}

fn probe_images(cfg: &RunConfig, manifest: &Manifest, enc: &EncoderConfig) -> Result<Dataset> {
    let p = &cfg.probe;
    let need = p.first + p.count;
    let mut data = match &p.images {
        Some(path) => read_cifar_batch(path)?,
        None => synthetic_dataset(need, enc.image_size, cfg.data.seed)?,
    };
    if data.len() < need {
        return Err(Error::invalid(format!("probe wants images {}..{need} but only {} exist", p.first, data.len())));
    }
    if let Some(s) = &manifest.standardization {
        data.standardize(s);
    }
    let idx: Vec<usize> = (p.first..need).collect();
    let b = data.batch::<f32>(&idx, None);
    Ok(Dataset { images: b.images, labels: idx.iter().map(|&i| data.labels[i]).collect() })
}

fn probe_as<T: Scalar>(
    cfg: &RunConfig,
    ck: &Path,
    manifest: &Manifest,
    enc: &EncoderConfig,
    layers: &[usize],
) -> Result<ProbeSummary> {
    let params = load_checkpoint::<T>(ck)?.params()?.clone();
    let data = probe_images(cfg, manifest, enc)?;
    let images = data.images.cast::<T>();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = patch_embed_on_tape(&mut tape, enc, &bound, "encoder", &images)?;
    let trace = encoder_on_tape(&mut tape, enc, &bound, "encoder", x, None)?;

    let root = cfg.out.join("probe");
    let mut summary = ProbeSummary {
        checkpoint: ck.to_path_buf(),
        variant: enc.variant.name().into(),
        layers: layers.iter().map(|l| l + 1).collect(),
        images: data.len(),
        files: 0,
        max_row_sum_error: 0.0,
        max_raw_asymmetry: None,
    };
    let (n, s) = (enc.n_heads, enc.seq_len());
    for &l in layers {
        let maps = tape.value(trace.attention[l].maps).to_f64_vec();
        let scores = tape.value(trace.attention[l].scores).to_f64_vec();
        for bi in 0..data.len() {
            let dir = root.join(format!("image{}", cfg.probe.first + bi)).join(format!("layer{}", l + 1));
            fs::create_dir_all(&dir)?;
            let head = |src: &[f64], h: usize| src[(bi * n + h) * s * s..(bi * n + h + 1) * s * s].to_vec();
            let mut mean = vec![0.0; s * s];
            for h in 0..n {
                let m = head(&maps, h);
                summary.max_row_sum_error = summary.max_row_sum_error.max(row_sum_error(&m, s));
                write_map(&dir, &format!("head{h}"), &m, s, s)?;
                summary.files += 2;
                mean.iter_mut().zip(&m).for_each(|(a, v)| *a += v);
                if cfg.probe.raw_scores {
                    let raw = head(&scores, h);
                    let asym = (0..s)
                        .flat_map(|i| (0..s).map(move |j| (i, j)))
                        .map(|(i, j)| (raw[i * s + j] - raw[j * s + i]).abs())
                        .fold(0.0f64, f64::max);
                    summary.max_raw_asymmetry = Some(summary.max_raw_asymmetry.unwrap_or(0.0).max(asym));
                    fs::write(dir.join(format!("head{h}_scores.csv")), csv(&raw, s))?;
                    summary.files += 1;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n as f64);
            summary.max_row_sum_error = summary.max_row_sum_error.max(row_sum_error(&mean, s));
            write_map(&dir, "mean", &mean, s, s)?;
            summary.files += 2;
            if enc.with_class_token {
                let g = enc.image_size / enc.patch_size;
                write_map(&dir, "cls_grid", &mean[1..s], g, g)?;
                summary.files += 2;
            }
        }
    }
    write_json(&root.join("summary.json"), &summary)?;
    Ok(summary)
}

fn row_sum_error(m: &[f64], s: usize) -> f64 {
    m.chunks(s).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn csv(m: &[f64], cols: usize) -> String {
    let mut out = String::with_capacity(m.len() * 12);
    for row in m.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Plain (ASCII) 8-bit PGM, scaled so the largest entry is white.
pub(crate) fn pgm(m: &[f64], rows: usize, cols: usize) -> String {
    let max = m.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in m.chunks(cols) {
        let px: Vec<String> = row
            .iter()
            .map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 })
            .map(|p| p.to_string())
            .collect();
        let _ = writeln!(out, "{}", px.join(" "));
    }
    out
}

fn write_map(dir: &Path, stem: &str, m: &[f64], rows: usize, cols: usize) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), csv(m, cols))?;
    fs::write(dir.join(format!("{stem}.pgm")), pgm(m, rows, cols))?;
    Ok(())
}
