//! Binary model checkpoints.
//!
//! Layout: magic `RMCK`, `u32` version, `u64` header length, a JSON header
//! (model config, tensor table, free-form metadata), then every tensor as
//! little-endian `f32` in table order. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Rmarn};
use crate::numcore::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"RMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Serializes `model` with optional metadata (epoch, metrics, ...).
pub fn to_bytes(model: &Rmarn<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config,
        tensors: model
            .params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params.num_scalars());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Rmarn<f32>, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let mut f = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<(Rmarn<f32>, serde_json::Value)> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 {
        return Err(corrupt("shorter than the fixed preamble"));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: MAGIC,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if hlen > body.len() as u64 {
        return Err(corrupt("header length exceeds file size"));
    }
    let (hjson, payload) = body.split_at(hlen as usize);
    let header: Header =
        serde_json::from_slice(hjson).map_err(|e| corrupt(&format!("header: {e}")))?;

    let expected_scalars: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let expected = 4 * expected_scalars as u64;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            got: payload.len() as u64,
        });
    }

    let reference = Rmarn::<f32>::new(header.config, 0)?;
    if reference.params.len() != header.tensors.len() {
        return Err(corrupt(&format!(
            "{} tensors listed, configuration needs {}",
            header.tensors.len(),
            reference.params.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for (entry, (name, want)) in header.tensors.iter().zip(reference.params.iter()) {
        if entry.name != name {
            return Err(corrupt(&format!(
                "tensor `{}` found where `{name}` was expected",
                entry.name
            )));
        }
        if entry.shape != want.shape() {
            return Err(Error::TensorShape {
                path: path.to_path_buf(),
                name: entry.name.clone(),
                expected: want.shape().to_vec(),
                got: entry.shape.clone(),
            });
        }
        let n = want.len();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((Rmarn::from_parts(header.config, store)?, header.meta))
}

pub fn load(path: &Path) -> Result<(Rmarn<f32>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afr::AfrConfig;
    use crate::rls::RlsConfig;

    fn model() -> Rmarn<f32> {
        let cfg = ModelConfig {
            text_width: 3,
            point_width: 4,
            afr: AfrConfig {
                d_model: 4,
                nhead: 2,
                layers: 1,
                ffn_width: 4,
                ..AfrConfig::default()
            },
            rls: RlsConfig {
                manifolds: 2,
                rank: 2,
                ..RlsConfig::default()
            },
            ..ModelConfig::default()
        };
        Rmarn::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let meta = serde_json::json!({"epoch": 3});
        let bytes = to_bytes(&m, meta.clone()).unwrap();
        let (back, meta2) = from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert_eq!(to_bytes(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = to_bytes(&model(), serde_json::Value::Null).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            from_bytes(Path::new("x"), &wrong),
            Err(Error::BadMagic { .. })
        ));
        bytes[4] = 9;
        assert!(matches!(
            from_bytes(Path::new("x"), &bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = to_bytes(&model(), serde_json::Value::Null).unwrap();
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            from_bytes(Path::new("x"), cut),
            Err(Error::PayloadLength { .. })
        ));
        assert!(matches!(
            from_bytes(Path::new("x"), &bytes[..10]),
            Err(Error::Corrupt { .. })
        ));
    }
}
