//! Checkpoint directory: `index.json` plus one tensor file per entry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DType, ParamGroup, ParamKind, ParamStore, Real};
use crate::media_io::{read_tensor, write_tensor, MediaError, TensorBlob};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error("checkpoint index is invalid: {0}")]
    BadIndex(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointItem {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub dtype: DType,
    pub entries: Vec<CheckpointItem>,
    /// Free-form JSON, e.g. the model configuration.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Writes every entry in registration order. Output bytes depend only on the
/// store contents and `metadata`.
pub fn save_checkpoint<F: Real>(store: &ParamStore<F>, dir: impl AsRef<Path>, metadata: serde_json::Value) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(store.len());
    for (i, e) in store.entries().iter().enumerate() {
        let file = format!("t{i:04}.bin");
        write_tensor(&TensorBlob::from_tensor(&e.value)?, dir.join(&file))?;
        let shape = if e.value.shape().is_empty() { vec![1] } else { e.value.shape().to_vec() };
        entries.push(CheckpointItem { name: e.name.clone(), file, shape, kind: e.kind, group: e.group });
    }
    let index = CheckpointIndex { dtype: F::DTYPE, entries, metadata };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| CheckpointError::BadIndex(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<CheckpointIndex, CheckpointError> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| CheckpointError::BadIndex(e.to_string()))
}

/// Rebuilds the store in index order, converting to `F` if needed.
pub fn load_checkpoint<F: Real>(dir: impl AsRef<Path>) -> Result<(ParamStore<F>, CheckpointIndex), CheckpointError> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    let mut store = ParamStore::new();
    for item in &index.entries {
        if item.file.contains('/') || item.file.contains('\\') || item.file.starts_with('.') {
            return Err(CheckpointError::BadIndex(format!("entry {} has a bad file name {:?}", item.name, item.file)));
        }
        let blob = read_tensor(dir.join(&item.file))?;
        if blob.shape() != item.shape.as_slice() {
            return Err(CheckpointError::BadIndex(format!(
                "entry {} shape {:?} disagrees with file shape {:?}",
                item.name,
                item.shape,
                blob.shape()
            )));
        }
        store
            .register(item.name.clone(), blob.to_tensor::<F>(), item.group, item.kind)
            .map_err(|e| CheckpointError::BadIndex(e.to_string()))?;
    }
    Ok((store, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5), ParamGroup::Backbone, ParamKind::Trainable).unwrap();
        s.register("bn.mean", Tensor::from_fn(&[4], |i| -(i as f32)), ParamGroup::Head, ParamKind::Buffer).unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample_store();
        save_checkpoint(&s, dir.path(), serde_json::json!({"d": 16})).unwrap();
        let (back, index) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(index.metadata["d"], 16);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let s = sample_store();
        save_checkpoint(&s, a.path(), serde_json::Value::Null).unwrap();
        save_checkpoint(&s, b.path(), serde_json::Value::Null).unwrap();
        for name in ["index.json", "t0000.bin", "t0001.bin"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }
}
