//! Versioned binary checkpoints of model parameters.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "LRCK"
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON: architecture, config hash, tensor names and shapes
//! payload      f64 values of every tensor in header order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};

pub const MAGIC: &[u8; 4] = b"LRCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    config_hash: String,
    tensors: Vec<TensorHeader>,
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialise");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(params: &ModelParams, config_hash: &str) -> Vec<u8> {
    let tensors = params.tensors();
    let header = Header {
        architecture: params.arch.clone(),
        config_hash: config_hash.to_string(),
        tensors: tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let n: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &tensors {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(params: &ModelParams, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, config_hash);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Format(format!("checkpoint truncated: need {n} bytes at offset {at}, file has {}", bytes.len()))
    })?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

/// Returns the parameters and the stored config hash.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, String)> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header =
        serde_json::from_slice(take(bytes, &mut at, header_len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.architecture.model.validate()?;
    let mut params = ModelParams::zeros(&header.architecture);
    {
        let mut views = params.tensors_mut();
        if views.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, architecture implies {}",
                header.tensors.len(),
                views.len()
            )));
        }
        for (view, th) in views.iter_mut().zip(&header.tensors) {
            if view.name != th.name || view.shape != th.shape {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    th.name, th.shape, view.name, view.shape
                )));
            }
            let raw = take(bytes, &mut at, 8 * view.data.len())?;
            for (dst, chunk) in view.data.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
    }
    if at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint payload", bytes.len() - at)));
    }
    Ok((params, header.config_hash))
}

/// Loads a checkpoint; warns when `expected_hash` is given and differs from the stored one.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (params, hash) = decode_checkpoint(&bytes)?;
    if let Some(expected) = expected_hash {
        if expected != hash {
            log::warn!(
                "checkpoint {} was written under config hash {hash}, current config hashes to {expected}",
                path.display()
            );
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fixture;
    use crate::model::EmbeddingMode;

    #[test]
    fn round_trip_is_exact() {
        for mode in [EmbeddingMode::Fixed, EmbeddingMode::Concat] {
            let fx = fixture(mode, 2).unwrap();
            let bytes = encode_checkpoint(&fx.params, "abc");
            let (back, hash) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(hash, "abc");
            assert_eq!(back, fx.params);
        }
    }

    #[test]
    fn truncated_and_versioned() {
        let fx = fixture(EmbeddingMode::Fixed, 2).unwrap();
        let bytes = encode_checkpoint(&fx.params, "h");
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bumped), Err(Error::Version { found: 2, expected: 1 })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&crate::model::ModelConfig::default());
        assert_eq!(a, config_hash(&crate::model::ModelConfig::default()));
        assert_eq!(a.len(), 64);
        let other = crate::model::ModelConfig {
            tag_hidden: 7,
            ..Default::default()
        };
        assert_ne!(a, config_hash(&other));
    }
}
