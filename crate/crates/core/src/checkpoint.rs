//! Checkpoints: a binary parameter archive plus a JSON manifest.
//!
//! Archive layout (little endian): magic `LANECKPT`, `u32` format version,
//! `u32` parameter count, then per parameter a `u32` name length, the UTF-8
//! name, `u64` rows, `u64` cols and `rows·cols` `f64` values. The embedding
//! table is always stored, frozen or not.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LaneModel, ModelConfig};
use crate::nn::ModelError;
use crate::optim::AdamConfig;
use crate::text_encoder::EmbeddingMatrix;
use crate::trainer::{EpochLog, TrainConfig};
use crate::Matrix;

const MAGIC: &[u8; 8] = b"LANECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub code_version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub item_count: usize,
    pub best_epoch: usize,
    pub best_valid_ndcg10: f64,
    pub history: Vec<EpochLog>,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn write_params(path: &Path, model: &LaneModel) -> Result<(), CheckpointError> {
    let store = model.store();
    let mut buf = Vec::with_capacity(16 + store.scalar_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, value) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(value.cols() as u64).to_le_bytes());
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Format { path: self.path.display().to_string(), message: "truncated archive".into() });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_params(path: &Path) -> Result<Vec<(String, Matrix)>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
    let bad = |message: String| CheckpointError::Format { path: path.display().to_string(), message };
    let mut r = Reader { bytes: &bytes, path };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint archive".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8".into()))?;
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if !r.bytes.is_empty() {
        return Err(bad("trailing bytes after the last parameter".into()));
    }
    Ok(out)
}

pub fn save(dir: &Path, model: &LaneModel, manifest: &CheckpointManifest) -> Result<(), CheckpointError> {
    write_params(&dir.join("checkpoint.bin"), model)?;
    let path = dir.join("checkpoint.json");
    let json = serde_json::to_string_pretty(manifest).expect("serializable manifest");
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn load(dir: &Path) -> Result<(LaneModel, CheckpointManifest), CheckpointError> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Format { path: path.display().to_string(), message: e.to_string() })?;
    let placeholder = EmbeddingMatrix::from_matrix(Matrix::zeros(manifest.item_count + 1, manifest.model.backbone.d));
    let mut model = LaneModel::new(manifest.model.clone(), &placeholder, 0)?;
    model.load_params(read_params(&dir.join("checkpoint.bin"))?)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentConfig;
    use crate::backbone::{BackboneConfig, BackboneVariant};
    use crate::corpus::build_fixed_sequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> LaneModel {
        let mut m = Matrix::random_normal(9, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        m.row_mut(0).fill(0.0);
        let config = ModelConfig {
            backbone: BackboneConfig { variant: BackboneVariant::SelfAttention, n: 4, d: 4, blocks: 2, heads: 2, dropout: 0.1 },
            alignment: Some(AlignmentConfig { d: 4, h: 2, d_k: 2, dropout: 0.1 }),
            freeze_embeddings: false,
        };
        LaneModel::new(config, &EmbeddingMatrix::from_matrix(m), 5).unwrap()
    }

    fn manifest(m: &LaneModel) -> CheckpointManifest {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            code_version: "test".into(),
            model: m.config().clone(),
            train: TrainConfig { learning_rate: 0.001, batch_size: 4, max_epochs: 3, patience: 1, seed: 1 },
            adam: AdamConfig::with_learning_rate(0.001),
            item_count: m.item_count(),
            best_epoch: 1,
            best_valid_ndcg10: 0.5,
            history: vec![],
            config: serde_json::json!({}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m, &manifest(&m)).unwrap();
        let (loaded, man) = load(dir.path()).unwrap();
        assert_eq!(loaded.store(), m.store());
        assert_eq!(man, manifest(&m));
        let seq = build_fixed_sequence(&[3, 7], 4);
        let prefs = Matrix::random_normal(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(loaded.outputs(&seq, Some(&prefs)).unwrap(), m.outputs(&seq, Some(&prefs)).unwrap());
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        write_params(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_params(&path), Err(CheckpointError::Format { .. })));
        fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(read_params(&path), Err(CheckpointError::Format { .. })));
    }
}
