//! Versioned binary checkpoints.
//!
//! Layout: `"IATC"`, version (u32 LE), header length (u32 LE), JSON header
//! (config, step, tensor directory), f32 LE payload, CRC-32 of everything
//! before it (u32 LE).

use std::path::Path;

use iat_tensor::{Param, Tensor};
use serde::{Deserialize, Serialize};

use super::{IatConfig, IatParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"IATC";

/// Parameters plus the optimizer step they were saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: IatParams<f32>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(params: IatParams<f32>, step: u64) -> Self {
        Checkpoint { params, step }
    }

    /// Errors unless the stored config equals `config`.
    pub fn expect_config(&self, config: IatConfig) -> Result<()> {
        let have = self.params.config();
        if have != config {
            return Err(Error::Config(format!(
                "checkpoint config {have:?} does not match requested {config:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: IatConfig,
    step: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut offset = 0;
    let tensors = ckpt
        .params
        .params()
        .iter()
        .map(|p| {
            let len = p.numel() * 4;
            let e = Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len,
            };
            offset += len;
            e
        })
        .collect();
    let header = Header {
        config: ckpt.params.config(),
        step: ckpt.step,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in ckpt.params.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint (missing IATC magic or truncated)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32_at(tail, 0);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or damaged"
        )));
    }
    let version = u32_at(body, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u32_at(body, 8) as usize;
    let json = body
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let payload = &body[12 + header_len..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.len != numel * 4 {
            return Err(Error::Format(format!("tensor {:?}: length {} ≠ 4·{numel}", e.name, e.len)));
        }
        let raw = payload
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| Error::Corrupt(format!("tensor {:?} lies outside the payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Param::new(e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        params: IatParams::from_params(header.config, params)?,
        step: header.step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample(cfg: IatConfig) -> Checkpoint {
        Checkpoint::new(IatParams::init(cfg, &mut stream(11, 1)).unwrap(), 42)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample(IatConfig::default());
        let back = read_checkpoint(&write_checkpoint(&ck)).unwrap();
        assert_eq!(back.step, 42);
        for (a, b) in ck.params.params().iter().zip(back.params.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn truncation_and_bitflips_are_corruption() {
        let bytes = write_checkpoint(&sample(IatConfig::default()));
        for cut in [3, 15, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(read_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(read_checkpoint(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_and_config_mismatch_rejected() {
        let mut bytes = write_checkpoint(&sample(IatConfig::default()));
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(_))));

        let wide = IatConfig {
            channels: 24,
            blocks: 2,
            dim: 64,
        };
        let ck = read_checkpoint(&write_checkpoint(&sample(wide))).unwrap();
        ck.expect_config(wide).unwrap();
        assert!(ck.expect_config(IatConfig::default()).is_err());
    }
}
