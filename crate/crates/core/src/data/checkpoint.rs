//! Checkpoint container, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "ACCELGCN"
//! version      u32      CHECKPOINT_VERSION
//! header_len   u64
//! header       JSON     {"config": TrainingConfig, "epoch_losses": [f64]}
//! count        u32      number of tensors
//! count times:
//!   name_len   u16
//!   name       UTF-8
//!   rows, cols u32, u32
//!   data       rows*cols f64, row-major
//! digest       32 bytes SHA-256 of everything above
//! ```
//!
//! Tensors appear in [`Model::tensors`] order: trainable slots, then
//! batch-norm running statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;
use crate::training::{ModelCheckpoint, TrainingConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACCELGCN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainingConfig,
    epoch_losses: Vec<f64>,
}

fn encode(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        epoch_losses: ckpt.epoch_losses.clone(),
    })?;
    let tensors = ckpt.model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in &tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Argument(format!("tensor name '{name}' too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically; identical checkpoints produce identical bytes.
pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::Integrity("checkpoint truncated before its digest".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checkpoint digest mismatch (truncated or corrupted)".into()));
    }

    let mut c = Cursor { bytes: body, pos: 12 };
    let header_len = usize::try_from(c.u64("header length")?).map_err(|_| Error::Integrity("header length".into()))?;
    let header: Header = serde_json::from_slice(c.take(header_len, "header")?)
        .map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "tensor name")?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32("tensor rows")? as usize;
        let cols = c.u32("tensor cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Integrity(format!("tensor '{name}' size overflows")))?;
        let data = c
            .take(n, &name)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if c.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes after tensors", body.len() - c.pos)));
    }
    header.config.validate().map_err(|e| Error::Integrity(format!("checkpoint config: {e}")))?;
    let model = Model::from_tensors(
        &header.config.arch,
        header.config.mixture_components,
        header.config.dropout,
        &tensors,
    )?;
    Ok(ModelCheckpoint {
        config: header.config,
        epoch_losses: header.epoch_losses,
        model,
    })
}

/// Reads a checkpoint, checking magic, then version, then the digest. No
/// model is returned from a damaged file.
pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchDescriptor, ArchKind};
    use crate::training::Trainer;

    fn small_checkpoint(kind: ArchKind, recurrent: bool) -> ModelCheckpoint {
        let config = TrainingConfig {
            arch: ArchDescriptor::new(kind, recurrent).with_widths([6, 10, 4]),
            mixture_components: 3,
            seed: 4,
            ..TrainingConfig::default()
        };
        Trainer::new(config).unwrap().into_checkpoint(vec![1.5, 0.25])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for (kind, rec) in [(ArchKind::Egcn, false), (ArchKind::Gat, true)] {
            let ckpt = small_checkpoint(kind, rec);
            let path = dir.path().join("m.ckpt");
            save_checkpoint(&path, &ckpt).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.config, ckpt.config);
            assert_eq!(back.epoch_losses, ckpt.epoch_losses);
            assert_eq!(back.model.tensors(), ckpt.model.tensors());
            assert_eq!(encode(&back).unwrap(), std::fs::read(&path).unwrap());
        }
    }

    #[test]
    fn flipped_version_byte_is_a_version_error() {
        let mut bytes = encode(&small_checkpoint(ArchKind::Fc, false)).unwrap();
        bytes[8] ^= 0x02;
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 3, supported: 1 })));
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let bytes = encode(&small_checkpoint(ArchKind::Dgcn, false)).unwrap();
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Integrity(_))));
    }
}
