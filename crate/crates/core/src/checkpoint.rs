//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "VCRCKPT\0"
//! version    u32
//! seed       u64
//! step       u64
//! channels   u32, then `channels` f64 means and `channels` f64 stds
//! has_ema    u8
//! count      u64 named arrays, each:
//!   kind     u8  (0 param, 1 buffer, 2 ema, 3 momentum)
//!   name     u32 length + UTF-8 bytes
//!   ndim     u32, then ndim u64 extents
//!   values   f64 per element
//! sha256     32 bytes over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{BufferStore, ParamStore};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"VCRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint at byte offset {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("array {name}: checkpoint has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("array {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint array {0} has no counterpart in the model")]
    Unexpected(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayKind {
    Param = 0,
    Buffer = 1,
    Ema = 2,
    Momentum = 3,
}

impl ArrayKind {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => ArrayKind::Param,
            1 => ArrayKind::Buffer,
            2 => ArrayKind::Ema,
            3 => ArrayKind::Momentum,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub kind: ArrayKind,
    pub name: String,
    pub tensor: Tensor,
}

/// Per-channel input normalization stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub normalization: Normalization,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    /// Snapshot of a model and, optionally, EMA shadows and momentum buffers
    /// (one tensor per parameter, in store order).
    pub fn capture(
        seed: u64,
        step: u64,
        normalization: Normalization,
        params: &ParamStore,
        buffers: &BufferStore,
        ema: Option<&[Tensor]>,
        momentum: Option<&[Tensor]>,
    ) -> Self {
        let mut arrays = Vec::new();
        for p in params.iter() {
            arrays.push(NamedArray {
                kind: ArrayKind::Param,
                name: p.name.clone(),
                tensor: p.value.clone(),
            });
        }
        for (name, t) in buffers.iter() {
            arrays.push(NamedArray {
                kind: ArrayKind::Buffer,
                name: name.to_string(),
                tensor: t.clone(),
            });
        }
        for (kind, extra) in [(ArrayKind::Ema, ema), (ArrayKind::Momentum, momentum)] {
            if let Some(ts) = extra {
                for (p, t) in params.iter().zip(ts) {
                    arrays.push(NamedArray {
                        kind,
                        name: p.name.clone(),
                        tensor: t.clone(),
                    });
                }
            }
        }
        Checkpoint {
            seed,
            step,
            normalization,
            arrays,
        }
    }

    pub fn has_ema(&self) -> bool {
        self.arrays.iter().any(|a| a.kind == ArrayKind::Ema)
    }

    fn of_kind(&self, kind: ArrayKind) -> impl Iterator<Item = &NamedArray> {
        self.arrays.iter().filter(move |a| a.kind == kind)
    }

    /// Overwrite parameters and buffers, checking that names and shapes
    /// match one-to-one.
    pub fn restore(&self, params: &mut ParamStore, buffers: &mut BufferStore) -> Result<(), CheckpointError> {
        let mut saved_params: Vec<&NamedArray> = self.of_kind(ArrayKind::Param).collect();
        for p in params.iter_mut() {
            let pos = saved_params
                .iter()
                .position(|a| a.name == p.name)
                .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            let a = saved_params.swap_remove(pos);
            check_shape(&a.name, p.value.shape(), a.tensor.shape())?;
            p.value = a.tensor.clone();
        }
        if let Some(a) = saved_params.first() {
            return Err(CheckpointError::Unexpected(a.name.clone()));
        }
        let mut saved_buffers: Vec<&NamedArray> = self.of_kind(ArrayKind::Buffer).collect();
        for (name, t) in buffers.iter_mut() {
            let pos = saved_buffers
                .iter()
                .position(|a| a.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
            let a = saved_buffers.swap_remove(pos);
            check_shape(&a.name, t.shape(), a.tensor.shape())?;
            *t = a.tensor.clone();
        }
        if let Some(a) = saved_buffers.first() {
            return Err(CheckpointError::Unexpected(a.name.clone()));
        }
        Ok(())
    }

    /// EMA shadows in parameter order, if the checkpoint has them.
    pub fn ema(&self, params: &ParamStore) -> Result<Option<Vec<Tensor>>, CheckpointError> {
        self.per_param(ArrayKind::Ema, params)
    }

    pub fn momentum(&self, params: &ParamStore) -> Result<Option<Vec<Tensor>>, CheckpointError> {
        self.per_param(ArrayKind::Momentum, params)
    }

    fn per_param(&self, kind: ArrayKind, params: &ParamStore) -> Result<Option<Vec<Tensor>>, CheckpointError> {
        if self.of_kind(kind).next().is_none() {
            return Ok(None);
        }
        params
            .iter()
            .map(|p| {
                let a = self
                    .of_kind(kind)
                    .find(|a| a.name == p.name)
                    .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
                check_shape(&a.name, p.value.shape(), a.tensor.shape())?;
                Ok(a.tensor.clone())
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.normalization.mean.len() as u32).to_le_bytes());
        for v in self.normalization.mean.iter().chain(&self.normalization.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.has_ema() as u8);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.push(a.kind as u8);
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.tensor.ndim() as u32).to_le_bytes());
            for &d in a.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.tensor.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated { offset: bytes.len() });
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let channels = r.u32()? as usize;
        let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let has_ema_at = r.pos;
        let has_ema = r.u8()?;
        let count = r.u64()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let kind_at = r.pos;
            let kind = ArrayKind::from_byte(r.u8()?).ok_or_else(|| CheckpointError::Malformed {
                offset: kind_at,
                detail: "unknown array kind".into(),
            })?;
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| CheckpointError::Malformed {
                offset: name_at,
                detail: "array name is not UTF-8".into(),
            })?;
            let ndim = r.u32()? as usize;
            let shape_at = r.pos;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = match numel {
                Some(n) if n > 0 => n,
                _ => {
                    return Err(CheckpointError::Malformed {
                        offset: shape_at,
                        detail: format!("invalid shape {shape:?}"),
                    })
                }
            };
            if numel.saturating_mul(8) > r.remaining() {
                return Err(CheckpointError::Truncated { offset: bytes.len() });
            }
            let data = (0..numel).map(|_| r.f64().map(|v| v as Real)).collect::<Result<Vec<_>, _>>()?;
            let tensor = Tensor::new(shape, data).expect("validated shape");
            arrays.push(NamedArray { kind, name, tensor });
        }
        let body_end = r.pos;
        let digest = r.take(DIGEST_LEN)?;
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: r.pos,
                detail: "trailing bytes after checksum".into(),
            });
        }
        let ckpt = Checkpoint {
            seed,
            step,
            normalization: Normalization { mean, std },
            arrays,
        };
        if (has_ema != 0) != ckpt.has_ema() {
            return Err(CheckpointError::Malformed {
                offset: has_ema_at,
                detail: "EMA flag disagrees with stored arrays".into(),
            });
        }
        Ok(ckpt)
    }

    /// Write through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn check_shape(name: &str, expected: &[usize], found: &[usize]) -> Result<(), CheckpointError> {
    if expected == found {
        Ok(())
    } else {
        Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated { offset: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm, Builder, Linear};
    use crate::rng;

    fn model(seed: u64) -> (ParamStore, BufferStore) {
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(seed);
        let mut b = Builder::new(&mut ps, &mut bs, &mut r);
        Linear::new(&mut b, "fc", 3, 2);
        BatchNorm::new(&mut b, "bn", 2, 1);
        (ps, bs)
    }

    fn sample() -> Checkpoint {
        let (ps, bs) = model(1);
        let ema: Vec<Tensor> = ps.iter().map(|p| p.value.map(|v| v * 0.5)).collect();
        let norm = Normalization {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![1.0, 2.0, 3.0],
        };
        Checkpoint::capture(9, 42, norm, &ps, &bs, Some(&ema), None)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restore_overwrites_model() {
        let c = sample();
        let (mut ps, mut bs) = model(2);
        c.restore(&mut ps, &mut bs).unwrap();
        let (orig, _) = model(1);
        assert_eq!(ps, orig);
        assert_eq!(c.ema(&ps).unwrap().unwrap().len(), ps.len());
        assert!(c.momentum(&ps).unwrap().is_none());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Truncated { .. } | CheckpointError::BadMagic),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let last_value = bytes.len() - DIGEST_LEN - 1;
        bytes[last_value] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 7, .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_the_array() {
        let c = sample();
        let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
        let mut r = rng::seeded(0);
        let mut b = Builder::new(&mut ps, &mut bs, &mut r);
        Linear::new(&mut b, "fc", 4, 2);
        BatchNorm::new(&mut b, "bn", 2, 1);
        match c.restore(&mut ps, &mut bs) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => assert_eq!(name, "fc.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}
