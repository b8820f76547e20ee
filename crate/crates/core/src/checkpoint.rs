//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "D2STCKPT"
//! version  u32
//! header   u64 length + UTF-8 JSON (CheckpointHeader)
//! count    u64
//! count × { name: u32 length + UTF-8,
//!           rank: u32, dims: rank × u64,
//!           width: u8 (bytes per element, 8 or 4),
//!           data: width × numel bytes }
//! ```
//!
//! Writing the same parameters twice yields identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelAssembly;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"D2STCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Resolved run configuration, opaque to this module.
    pub config: serde_json::Value,
    /// Whether only trainable parameters are stored; the frozen backbone
    /// is then rebuilt from its seed.
    pub adapters_only: bool,
    /// Digest of the frozen parameters the checkpoint was taken against.
    pub frozen_digest: String,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures parameters of `model` in parameter order.
    pub fn capture(model: &ModelAssembly, config: serde_json::Value, adapters_only: bool, steps: usize) -> Self {
        let tensors = model
            .store
            .iter()
            .filter(|(_, p)| p.trainable || !adapters_only)
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Self {
            header: CheckpointHeader {
                config,
                adapters_only,
                frozen_digest: model.frozen_digest(),
                steps,
            },
            tensors,
        }
    }

    /// Loads stored values into `model`. Every stored name must exist with
    /// the same shape, and every trainable parameter must be covered.
    pub fn restore(&self, model: &mut ModelAssembly) -> Result<()> {
        if self.header.frozen_digest != model.frozen_digest() {
            return Err(format_err(
                "checkpoint was taken against a different frozen backbone (digest mismatch)",
            ));
        }
        let trainable = model.store.iter().filter(|(_, p)| p.trainable).count();
        let mut covered = 0;
        for (name, value) in &self.tensors {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| format_err(format!("checkpoint tensor `{name}` has no matching parameter")))?;
            let p = model.store.get(id);
            if p.value.shape() != value.shape() {
                return Err(format_err(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            if p.trainable {
                covered += 1;
            }
            model.store.get_mut(id).value = value.clone();
        }
        if covered != trainable {
            return Err(format_err(format!(
                "checkpoint covers {covered} of {trainable} trainable parameters"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).map_err(|e| format_err(e.to_string()))?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(std::mem::size_of::<Real>() as u8);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint archive (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let len = read_len(&mut r, read_u64)?;
        let header: CheckpointHeader =
            serde_json::from_slice(take(&mut r, len)?).map_err(|e| format_err(format!("bad header: {e}")))?;
        let count = read_len(&mut r, read_u64)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = read_len(&mut r, |r| read_u32(r).map(u64::from))?;
            let name = String::from_utf8(take(&mut r, nlen)?.to_vec()).map_err(|_| format_err("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_len(&mut r, read_u64))
                .collect::<Result<Vec<usize>>>()?;
            let mut width = [0u8; 1];
            read_exact(&mut r, &mut width)?;
            if width[0] as usize != std::mem::size_of::<Real>() {
                return Err(format_err(format!(
                    "tensor `{name}` stores {}-byte elements, this build uses {}",
                    width[0],
                    std::mem::size_of::<Real>()
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut r, numel * width[0] as usize)?;
            let data = raw
                .chunks_exact(std::mem::size_of::<Real>())
                .map(|c| Real::from_le_bytes(c.try_into().expect("chunk width")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| format_err(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(format_err(format!("{} trailing bytes after the last tensor", r.len())));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub const TENSOR_MAGIC: &[u8; 8] = b"D2STTNSR";

/// Writes one tensor as `magic, rank: u32, dims: rank × u64, width: u8, data`.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + t.len() * std::mem::size_of::<Real>());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(std::mem::size_of::<Real>() as u8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    if take(&mut r, 8)? != TENSOR_MAGIC {
        return Err(format_err("not a tensor file (bad magic)"));
    }
    let rank = read_u32(&mut r)? as usize;
    let shape = (0..rank).map(|_| read_len(&mut r, read_u64)).collect::<Result<Vec<usize>>>()?;
    let width = take(&mut r, 1)?[0] as usize;
    if width != std::mem::size_of::<Real>() {
        return Err(format_err(format!("tensor file stores {width}-byte elements")));
    }
    let numel: usize = shape.iter().product();
    let raw = take(&mut r, numel * width)?;
    if !r.is_empty() {
        return Err(format_err("trailing bytes after tensor data"));
    }
    let data = raw
        .chunks_exact(width)
        .map(|c| Real::from_le_bytes(c.try_into().expect("chunk width")))
        .collect();
    Tensor::new(shape, data).map_err(|e| format_err(e.to_string()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(format_err("checkpoint archive is truncated"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a length and rejects values that cannot fit in the remaining input.
fn read_len(r: &mut &[u8], f: impl Fn(&mut &[u8]) -> Result<u64>) -> Result<usize> {
    let v = f(r)?;
    usize::try_from(v)
        .ok()
        .filter(|&n| n <= (1 << 40))
        .ok_or_else(|| format_err(format!("implausible length {v} in checkpoint")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::backbone::{BackboneConfig, InsertionPolicy};

    fn model() -> ModelAssembly {
        let cfg = BackboneConfig {
            stages: 2,
            ..BackboneConfig::four_stage()
        };
        ModelAssembly::assemble(&cfg, &InsertionPolicy::Full, &AdapterConfig::vanilla(), 3).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let ck = Checkpoint::capture(&m, serde_json::json!({"k": 1}), true, 0);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.header, ck.header);
        assert!(back.tensors.iter().zip(&ck.tensors).all(|(a, b)| a.0 == b.0 && a.1.bitwise_eq(&b.1)));
    }

    #[test]
    fn tensor_file_roundtrip() {
        let t = Tensor::from_fn([2, 3, 1], |i| i as Real * 0.25 - 1.0);
        let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        assert!(back.bitwise_eq(&t));
        assert!(tensor_from_bytes(&tensor_to_bytes(&t)[..20]).is_err());
    }

    #[test]
    fn truncated_and_foreign_archives_are_rejected() {
        let bytes = Checkpoint::capture(&model(), serde_json::Value::Null, true, 0).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Format(_))));
    }

    #[test]
    fn restore_rejects_mismatched_model() {
        let ck = Checkpoint::capture(&model(), serde_json::Value::Null, true, 0);
        let mut other = ModelAssembly::assemble(
            &BackboneConfig {
                stages: 2,
                ..BackboneConfig::four_stage()
            },
            &InsertionPolicy::Stages(vec![0]),
            &AdapterConfig::vanilla(),
            3,
        )
        .unwrap();
        assert!(matches!(ck.restore(&mut other), Err(Error::Format(_))));
    }
}
