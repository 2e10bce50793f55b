//! Run configuration, run manifests and the command implementations behind
//! the `superkernel` binary.

mod bench;
mod commands;
mod probe;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::kernels::{KernelSpec, DEFAULT_BUDGET_BYTES};
use crate::model::MaeConfig;
use crate::train::{load_cifar10, standardized, synthetic_dataset, Cifar10, Dataset, TrainConfig};
use crate::{Error, Precision, Result};

pub use bench::{bench, BenchRow, BenchStatus};
pub use commands::{finetune, pretrain, FinetuneSummary, PretrainSummary};
pub use probe::{parse_layers, probe, ProbeSummary};
pub use verify::{run_suites, verify, Check, Suite, VerifyReport};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 binary directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Use only the first `train_size` training examples. Synthetic data
    /// defaults to 1000 of each.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
    /// Generator seed for synthetic data, independent of the run seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synthetic, dir: None, train_size: None, test_size: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Pretraining checkpoint directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub n_classes: usize,
    /// Residual and MLP dropout of the classifier.
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { checkpoint: None, n_classes: 10, dropout: 0.1, train: TrainConfig::finetune() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub suite: String,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { suite: "all".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// CIFAR-10 binary batch file; synthetic images when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// First image index and number of images.
    pub first: usize,
    pub count: usize,
    /// Also dump pre-softmax scores.
    pub raw_scores: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { checkpoint: None, images: None, first: 0, count: 1, raw_scores: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Materialization limit.
    pub budget_bytes: u64,
    pub reps: usize,
    /// `[B, S, D]` points; references are the inputs themselves (`R = S`).
    pub grid: Vec<[usize; 3]>,
    /// Inner output width.
    pub heads: usize,
    /// Tile extent along `S` and `R` in streamed mode.
    pub block: usize,
    pub kernel: KernelSpec,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            budget_bytes: DEFAULT_BUDGET_BYTES as u64,
            reps: 3,
            grid: vec![[1, 4, 4], [2, 8, 8], [2, 16, 16], [4, 64, 256]],
            heads: 2,
            block: 8,
            kernel: KernelSpec::Linear,
        }
    }
}

fn default_model() -> MaeConfig {
    MaeConfig::tiny(Variant::Pseudo)
}

/// Everything a command needs, read from one TOML document.
/// Top-level keys are shared across commands; CLI flags override single keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out: PathBuf,
    /// Finetune: number of leading encoder blocks kept. Probe: 1-based layer
    /// range such as `1-6`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<String>,
    /// Checkpoint to continue pretraining or finetuning from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default = "default_model")]
    pub model: MaeConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub verify: VerifyConfig,
    pub probe: ProbeConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            out: PathBuf::from("runs/default"),
            layers: None,
            resume: None,
            data: DataConfig::default(),
            model: default_model(),
            pretrain: TrainConfig::pretrain(),
            finetune: FinetuneConfig::default(),
            verify: VerifyConfig::default(),
            probe: ProbeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets the dotted `key` in `table`, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}

/// Deep-merges `over` into `base`; scalars and arrays in `over` win.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Reads `path` (a config or a run manifest) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let mut t: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                // a run manifest carries the resolved config under `config`
                match (t.contains_key("command"), t.remove("config")) {
                    (true, Some(toml::Value::Table(c))) => c,
                    (_, Some(other)) => {
                        t.insert("config".into(), other);
                        t
                    }
                    (_, None) => t,
                }
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_key(&mut table, k, v)?;
        }
        let mut base = Self::default().to_table()?;
        merge(&mut base, table);
        let table = base;
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.pretrain.validate()?;
        cfg.finetune.train.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        crate::train::to_table(self)
    }

    /// Pretraining hyperparameters with the run seed and precision applied.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, precision: self.precision, ..self.pretrain.clone() }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, precision: self.precision, ..self.finetune.train.clone() }
    }

    /// Train and test splits, standardized with train-split constants.
    pub fn load_data(&self) -> Result<Cifar10> {
        let enc = &self.model.encoder;
        let mut c = match self.data.source {
            DataSource::Cifar10 => {
                let dir = self.data.dir.clone().ok_or_else(|| Error::Config("data.dir is required for cifar10".into()))?;
                load_cifar10(&dir)?
            }
            DataSource::Synthetic => {
                let (ntr, nte) = (self.data.train_size.unwrap_or(1000), self.data.test_size.unwrap_or(1000));
                let train = synthetic_dataset(ntr, enc.image_size, self.data.seed)?;
                let test = synthetic_dataset(nte, enc.image_size, self.data.seed ^ 0x5eed_7e57)?;
                standardized(train, test)?
            }
        };
        if let Some(n) = self.data.train_size {
            c.train = c.train.take(n);
        }
        if let Some(n) = self.data.test_size {
            c.test = c.test.take(n);
        }
        check_geometry(&c.train, enc.image_size, enc.channels)?;
        Ok(c)
    }
}

fn check_geometry(d: &Dataset, size: usize, channels: usize) -> Result<()> {
    let s = d.images.shape();
    if s.len() != 4 || s[1] != channels || s[2] != size || s[3] != size {
        return Err(Error::Config(format!(
            "dataset images are {:?}; the model expects {channels}x{size}x{size}",
            &s[1..]
        )));
    }
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Record of one command invocation, written to `out/run_manifest.toml`
/// before anything else and rewritten with the finish time at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    /// Unix seconds.
    pub started_at: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<String>,
    pub config: toml::Table,
}

impl RunManifest {
    /// Writes the opening manifest for `command`.
    pub fn begin(command: &str, config_path: Option<&Path>, cfg: &RunConfig) -> Result<Self> {
        let m = Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            seed: cfg.seed,
            out: cfg.out.clone(),
            started_at: unix_now(),
            finished_at: None,
            exit_status: None,
            config: cfg.to_table()?,
        };
        m.write()?;
        Ok(m)
    }

    pub fn finish(mut self, status: &str) -> Result<()> {
        self.finished_at = Some(unix_now());
        self.exit_status = Some(status.into());
        self.write()
    }

    fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(self.out.join(RUN_MANIFEST_FILE), text)?;
        Ok(())
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
