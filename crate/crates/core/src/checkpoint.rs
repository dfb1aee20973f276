//! Binary checkpoint container for [`EncoderParams`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "SOFTCLU\0"
//! format version   u32      currently 1
//! metadata length  u32
//! metadata         UTF-8 JSON: encoder and solver config, config hash,
//!                  epoch, step
//! tensor count     u32
//! per tensor:
//!   name length    u32
//!   name           UTF-8
//!   rank           u32
//!   dims           rank x u64
//!   data           prod(dims) x f64 (little-endian IEEE 754)
//! ```
//!
//! Writing is a pure function of the parameters and metadata, so equal
//! training runs yield byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::ot::SolverConfig;

pub const MAGIC: &[u8; 8] = b"SOFTCLU\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub solver: SolverConfig,
    /// Hash of the resolved training config that produced the weights.
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        push_len(&mut out, meta.len())?;
        out.extend_from_slice(&meta);

        let names = self.params.tensor_names();
        let shapes = self.params.tensor_shapes();
        let tensors = self.params.tensors();
        push_len(&mut out, names.len())?;
        for ((name, shape), data) in names.iter().zip(&shapes).zip(&tensors) {
            push_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_len(&mut out, shape.len())?;
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;

        if meta.solver.clusters != meta.encoder.clusters {
            return Err(Error::Checkpoint(format!(
                "solver has {} clusters, head has {}",
                meta.solver.clusters, meta.encoder.clusters
            )));
        }
        let mut params = EncoderParams::init(&meta.encoder, 0)
            .map_err(|e| Error::Checkpoint(format!("stored encoder config is invalid: {e}")))?;
        let names = params.tensor_names();
        let shapes = params.tensor_shapes();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                names.len()
            )));
        }
        let mut flat = Vec::with_capacity(params.num_scalars());
        for (name, shape) in names.iter().zip(&shapes) {
            let len = r.u32()? as usize;
            let stored = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if stored != name {
                return Err(Error::Checkpoint(format!("expected tensor '{name}', found '{stored}'")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {dims:?}, config implies {shape:?}"
                )));
            }
            let numel: usize = dims.iter().product();
            for _ in 0..numel {
                flat.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        params.set_flat(&flat)?;
        Ok(Self { meta, params })
    }

    /// Write atomically: a crash mid-write leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn push_len(out: &mut Vec<u8>, len: usize) -> Result<()> {
    let len = u32::try_from(len).map_err(|_| Error::Checkpoint("length exceeds u32".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = EncoderConfig {
            hidden: vec![4],
            feature_dim: 3,
            global_context: true,
            clusters: 2,
        };
        let mut params = EncoderParams::init(&config, 5).unwrap();
        params.lambda_raw = -0.25;
        Checkpoint {
            meta: CheckpointMeta {
                encoder: config,
                solver: SolverConfig {
                    clusters: 2,
                    ..SolverConfig::default()
                },
                config_hash: "abc".into(),
                epoch: 3,
                step: 17,
            },
            params,
        }
    }

    #[test]
    fn bytes_roundtrip() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        assert_eq!(bytes, sample().to_bytes().unwrap());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn hash_is_hex() {
        let h = sha256_hex(b"abc");
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
