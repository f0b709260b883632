//! Checkpoint container: a versioned binary file holding the model config,
//! a label, named tensors as row-major little-endian f32, and a SHA-256
//! content hash over everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EstimatorParams, TcqeConfig};

const MAGIC: &[u8; 4] = b"TCQE";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("content hash mismatch; the file was modified after writing")]
    HashMismatch,
    #[error(transparent)]
    Estimator(#[from] super::EstimatorError),
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TcqeConfig,
    label: String,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize params to the checkpoint container and write it atomically.
pub fn save_checkpoint(
    path: &Path,
    params: &EstimatorParams,
    label: &str,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let meta = serde_json::to_vec(&CheckpointMeta {
        config: params.config.clone(),
        label: label.to_string(),
    })
    .expect("meta serializes");
    put_u64(&mut buf, meta.len() as u64);
    buf.extend_from_slice(&meta);

    let tensors = params.tensors();
    put_u64(&mut buf, tensors.len() as u64);
    for (name, tensor) in tensors {
        put_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(&mut buf, tensor.len() as u64);
        for &v in tensor {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let hash = Sha256::digest(&buf);
    buf.extend_from_slice(&hash);

    let tmp = path.with_extension("tmp");
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Load and verify a checkpoint; returns the params and their label.
pub fn load_checkpoint(path: &Path) -> Result<(EstimatorParams, String), CheckpointError> {
    let data = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if data.len() < 32 + 8 {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    let (body, stored_hash) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != stored_hash {
        return Err(CheckpointError::HashMismatch);
    }

    let mut r = Reader { data: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("bad metadata: {e}")))?;
    meta.config.validate()?;

    // Shape the params from the config, then fill tensors by name.
    let mut params = EstimatorParams::init(&meta.config, 0)?;
    let n_tensors = r.u64()? as usize;
    let expected = params.tensors().len();
    if n_tensors != expected {
        return Err(CheckpointError::Corrupt(format!(
            "expected {expected} tensors, found {n_tensors}"
        )));
    }
    for ti in 0..n_tensors {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let count = r.u64()? as usize;
        let bytes = r.take(count * 4)?;
        let mut tensors = params.tensors_mut();
        let (expected_name, tensor) = &mut tensors[ti];
        if *expected_name != name {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {ti} is {name:?}, expected {expected_name:?}"
            )));
        }
        if tensor.len() != count {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name} has {count} elements, expected {}",
                tensor.len()
            )));
        }
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            if !v.is_finite() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name} holds a non-finite value at index {i}"
                )));
            }
            tensor[i] = v;
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((params, meta.label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::tests::tiny_config;
    use crate::estimator::forward;

    #[test]
    fn checkpoint_round_trips_through_f32() {
        let params = EstimatorParams::init(&tiny_config(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tcqe");
        save_checkpoint(&path, &params, "unit").unwrap();
        let (loaded, label) = load_checkpoint(&path).unwrap();
        assert_eq!(label, "unit");
        assert_eq!(loaded.config, params.config);
        // f32 storage: scores agree to single precision.
        let tokens = vec![1u32, 2, 3, 4];
        let a = forward(&params, &tokens).unwrap();
        let b = forward(&loaded, &tokens).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let params = EstimatorParams::init(&tiny_config(), 22).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tcqe");
        save_checkpoint(&path, &params, "unit").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::HashMismatch)
        ));
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.tcqe");
        std::fs::write(&path, b"definitely not a checkpoint, far too short to be").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
