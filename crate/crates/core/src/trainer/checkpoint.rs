use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, TrainConfig, TrainError};
use crate::autodiff::Tensor;
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "tensors.bin";
pub const LOSS_LOG: &str = "loss_log.jsonl";

/// Which part of the training state a tensor entry holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
    BnMean,
    BnVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub len: u64,
}

/// Position of the loop: the next batch to run is batch `batch` of epoch
/// `epoch`, and `step` updates have been applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
}

/// The shuffle stream is re-derived per epoch from the seed, so the seed and
/// the loop position fully determine it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub rng: RngState,
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Complete training state: model, optimizer moments, normalization
/// statistics, loop position and the log so far.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub state: TrainState,
    pub log: Vec<String>,
}

const DTYPE: &str = "f64_le";

impl Checkpoint {
    fn entries(&self) -> Vec<(String, TensorRole, Vec<usize>, &[f64])> {
        let store = &self.model.store;
        let mut out = Vec::new();
        for p in store.params() {
            out.push((p.name.clone(), TensorRole::Param, p.value.shape().to_vec(), p.value.data()));
        }
        for p in store.params() {
            out.push((p.name.clone(), TensorRole::AdamM, p.m.shape().to_vec(), p.m.data()));
        }
        for p in store.params() {
            out.push((p.name.clone(), TensorRole::AdamV, p.v.shape().to_vec(), p.v.data()));
        }
        for b in store.buffers() {
            out.push((b.name.clone(), TensorRole::BnMean, vec![b.mean.len()], &b.mean[..]));
            out.push((b.name.clone(), TensorRole::BnVar, vec![b.var.len()], &b.var[..]));
        }
        out
    }

    pub fn manifest_and_blob(&self) -> (CheckpointManifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, role, shape, data) in self.entries() {
            let offset = blob.len() as u64;
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry { name, role, shape, dtype: DTYPE.into(), offset, len: data.len() as u64 });
        }
        let manifest = CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model: self.model.config().clone(),
            train: self.train.clone(),
            state: self.state,
            rng: RngState { algorithm: "chacha8".into(), seed: self.train.seed, epoch: self.state.epoch },
            blob: CHECKPOINT_BLOB.into(),
            blob_bytes: blob.len() as u64,
            tensors,
        };
        (manifest, blob)
    }

    /// Writes `dir/manifest.json`, `dir/tensors.bin` and `dir/loss_log.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let (manifest, blob) = self.manifest_and_blob();
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| io_err(&p, e))
        };
        write(CHECKPOINT_BLOB, &blob)?;
        write(LOSS_LOG, log_text(&self.log).as_bytes())?;
        write(CHECKPOINT_MANIFEST, json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let manifest = read_manifest(dir)?;
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(TrainError::Checkpoint(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
        }
        let mut model = Model::new(manifest.model.clone(), 0)?;
        let expected = Checkpoint { model: model.clone(), train: manifest.train.clone(), state: manifest.state, log: vec![] };
        let layout: Vec<(String, TensorRole, Vec<usize>)> =
            expected.entries().into_iter().map(|(n, r, s, _)| (n, r, s)).collect();
        if layout.len() != manifest.tensors.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} tensors stored, model needs {}",
                manifest.tensors.len(),
                layout.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.len());
        for ((name, role, shape), e) in layout.iter().zip(&manifest.tensors) {
            if &e.name != name || e.role != *role || &e.shape != shape || e.dtype != DTYPE {
                return Err(TrainError::Checkpoint(format!("entry {} ({:?}) does not match the model layout", e.name, e.role)));
            }
            let start = e.offset as usize;
            let end = start + 8 * e.len as usize;
            if e.len as usize != shape.iter().product::<usize>() || end > blob.len() {
                return Err(TrainError::Checkpoint(format!("entry {} is out of bounds", e.name)));
            }
            let data: Vec<f64> =
                blob[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            values.push(data);
        }
        // same order as `entries`: values, first moments, second moments, stats
        let mut it = values.into_iter();
        let mut next = || it.next().expect("checked count");
        let params = model.store.params_mut();
        for p in params.iter_mut() {
            p.value = Tensor::new(p.value.shape(), next())?;
        }
        for p in params.iter_mut() {
            p.m = Tensor::new(p.m.shape(), next())?;
        }
        for p in params.iter_mut() {
            p.v = Tensor::new(p.v.shape(), next())?;
        }
        for b in model.store.buffers_mut() {
            b.mean = next();
            b.var = next();
        }
        let log_path = dir.join(LOSS_LOG);
        let log = match fs::read_to_string(&log_path) {
            Ok(s) => s.lines().map(str::to_string).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&log_path, e)),
        };
        Ok(Self { model, train: manifest.train, state: manifest.state, log })
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, TrainError> {
    let path = if dir.is_dir() { dir.join(CHECKPOINT_MANIFEST) } else { dir.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported schema_version {}", manifest.schema_version)));
    }
    Ok(manifest)
}

pub(crate) fn log_text(lines: &[String]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s
}
