use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::Standardization;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

/// Tensor groups stored in a checkpoint.
pub const GROUP_PARAMS: &str = "params";
pub const GROUP_ADAM_M: &str = "adam_m";
pub const GROUP_ADAM_V: &str = "adam_v";

/// Hex SHA-256 of the JSON encoding of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Step-rng position: streams are derived from `(seed, step)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    /// Hex, since TOML integers are signed 64-bit.
    pub seed: String,
    pub next_stream: u64,
}

impl RngState {
    pub fn new(seed: u64, next_stream: u64) -> Self {
        Self { algorithm: "chacha8".into(), seed: format!("{seed:016x}"), next_stream }
    }

    pub fn seed(&self) -> Result<u64> {
        u64::from_str_radix(&self.seed, 16).map_err(|e| Error::Checkpoint(format!("bad rng seed `{}`: {e}", self.seed)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub group: String,
    pub path: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
}

/// Structured-text half of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    /// `mae` or `classifier`.
    pub kind: String,
    /// Hash of the full model config.
    pub arch_hash: String,
    /// Hash of the encoder's shape-determining fields, depth excluded.
    pub backbone_hash: String,
    pub dtype: String,
    pub step: u64,
    pub adam_t: u64,
    pub rejected_steps: u64,
    pub rng: RngState,
    pub model: toml::Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    #[serde(default)]
    pub tensors: Vec<TensorRecord>,
}

/// A loaded checkpoint: manifest plus tensor groups.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub manifest: Manifest,
    pub groups: BTreeMap<String, ParamStore<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn group(&self, name: &str) -> Result<&ParamStore<T>> {
        self.groups.get(name).ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{name}` tensors")))
    }

    pub fn params(&self) -> Result<&ParamStore<T>> {
        self.group(GROUP_PARAMS)
    }
}

/// Converts any serializable value to a TOML table for the manifest.
pub fn to_table<C: Serialize>(value: &C) -> Result<toml::Table> {
    match toml::Value::try_from(value).map_err(|e| Error::Checkpoint(e.to_string()))? {
        toml::Value::Table(t) => Ok(t),
        other => Err(Error::Checkpoint(format!("expected a table, got {}", other.type_str()))),
    }
}

pub fn from_table<C: for<'de> Deserialize<'de>>(table: &toml::Table) -> Result<C> {
    toml::Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| Error::Checkpoint(e.to_string()))
}

/// Writes `dir/params.bin` then `dir/manifest.toml`; `manifest.tensors` and
/// `manifest.dtype` are filled in from `groups`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, mut manifest: Manifest, groups: &[(&str, &ParamStore<T>)]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let total: usize = groups.iter().map(|(_, s)| s.numel()).sum();
    let mut blob = Vec::with_capacity(total * T::BYTES);
    manifest.tensors.clear();
    let mut offset = 0;
    for (group, store) in groups {
        for (path, t) in store.iter() {
            manifest.tensors.push(TensorRecord {
                group: group.to_string(),
                path: path.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            t.data().iter().for_each(|&v| v.write_le(&mut blob));
            offset += t.numel();
        }
    }
    manifest.format = FORMAT_VERSION;
    manifest.dtype = T::NAME.to_string();
    fs::write(dir.join(PARAMS_FILE), &blob)?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

/// Loads a checkpoint written with element type `T`.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} values; requested precision is {}",
            manifest.dtype,
            T::NAME
        )));
    }
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let mut groups: BTreeMap<String, ParamStore<T>> = BTreeMap::new();
    for rec in &manifest.tensors {
        let n: usize = rec.shape.iter().product();
        let (lo, hi) = (rec.offset * T::BYTES, (rec.offset + n) * T::BYTES);
        let bytes = blob.get(lo..hi).ok_or_else(|| {
            Error::Checkpoint(format!("`{}` spans bytes {lo}..{hi} but {PARAMS_FILE} has {}", rec.path, blob.len()))
        })?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        groups.entry(rec.group.clone()).or_default().insert(rec.path.clone(), Tensor::new(rec.shape.clone(), data)?);
    }
    Ok(Checkpoint { manifest, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest() -> Manifest {
        Manifest {
            format: 0,
            kind: "mae".into(),
            arch_hash: "a".into(),
            backbone_hash: "b".into(),
            dtype: String::new(),
            step: 3,
            adam_t: 3,
            rejected_steps: 0,
            rng: RngState::new(u64::MAX, 4),
            model: toml::Table::new(),
            train: None,
            standardization: Some(Standardization::identity(3)),
            tensors: vec![],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::<f32>::new();
        p.insert("x.w", Tensor::randn([3, 4], 1.0, &mut rng));
        p.insert("x.b", Tensor::new([2], vec![f32::MIN_POSITIVE / 2.0, -0.0]).unwrap());
        let mut m = ParamStore::<f32>::new();
        m.insert("x.w", Tensor::randn([3, 4], 1.0, &mut rng));
        save_checkpoint(dir.path(), manifest(), &[(GROUP_PARAMS, &p), (GROUP_ADAM_M, &m)]).unwrap();
        let ck = load_checkpoint::<f32>(dir.path()).unwrap();
        assert!(ck.params().unwrap().bit_identical(&p));
        assert!(ck.group(GROUP_ADAM_M).unwrap().bit_identical(&m));
        assert_eq!(ck.manifest.rng.seed().unwrap(), u64::MAX);
        assert_eq!(ck.manifest.dtype, "f32");
        assert!(load_checkpoint::<f64>(dir.path()).is_err());
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::ones([8]));
        save_checkpoint(dir.path(), manifest(), &[(GROUP_PARAMS, &p)]).unwrap();
        fs::write(dir.path().join(PARAMS_FILE), [0u8; 12]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn hash_is_stable_and_discriminating() {
        let a = config_hash(&("x", 1)).unwrap();
        assert_eq!(a, config_hash(&("x", 1)).unwrap());
        assert_ne!(a, config_hash(&("x", 2)).unwrap());
        assert_eq!(a.len(), 64);
    }
}
