//! Versioned binary parameter checkpoints.
//!
//! Layout: magic `GTCK`, u32 version, u64 header length, JSON header
//! (config, step, seed, tensor names and lengths, free-form echo), the
//! tensors as little-endian f64 in visiting order, and finally the SHA-256
//! of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::EncoderConfig;
use super::params::Params;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: EncoderConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<(String, usize)>,
    /// Configuration text of the run that produced the checkpoint.
    pub echo: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: Params, step: u64, seed: u64, echo: impl Into<String>) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                config,
                step,
                seed,
                tensors,
                echo: echo.into(),
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 8 * self.params.num_params() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Malformed("checkpoint truncated".into());
        if bytes.len() < 4 + 4 + 8 + 32 {
            return Err(short());
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Malformed("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(Error::Checksum {
                stored: hex(stored),
                computed: hex(&computed),
            });
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_bytes = body.get(16..16 + hlen).ok_or_else(short)?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        header.config.validate()?;
        let mut params = Params::init(&header.config, 0);
        let mut data = &body[16 + hlen..];
        {
            let tensors = params.tensors_mut();
            if tensors.len() != header.tensors.len() {
                return Err(Error::Malformed("tensor count differs from config".into()));
            }
            for ((name, t), (hname, hlen)) in tensors.into_iter().zip(&header.tensors) {
                if &name != hname || t.len() != *hlen {
                    return Err(Error::Malformed(format!("tensor {hname} does not match config")));
                }
                if data.len() < 8 * t.len() {
                    return Err(short());
                }
                for (x, chunk) in t.iter_mut().zip(data.chunks_exact(8)) {
                    *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                }
                data = &data[8 * t.len()..];
            }
        }
        if !data.is_empty() {
            return Err(Error::Malformed("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = EncoderConfig::toy(12);
        let ck = Checkpoint::new(cfg, Params::init(&cfg, 4), 17, 4, "seed = 4\n");
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(ck.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = EncoderConfig::toy(12);
        let mut bytes = Checkpoint::new(cfg, Params::init(&cfg, 4), 1, 4, "").to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { .. })));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
