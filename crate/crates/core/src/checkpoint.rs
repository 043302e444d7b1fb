//! Named-tensor checkpoint container.
//!
//! Layout: `b"OVU1"`, format version (u32 LE), CRC32 of the payload (u32 LE),
//! then the payload: a u32 record count followed by records
//! `[name_len u32, name, dtype u8, rank u8, dims u32 x rank, values LE]`.
//! The last record is named [`META_RECORD`], has dtype tag [`META_TAG`] and
//! holds the JSON metadata as bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UnifiedModel};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"OVU1";
pub const VERSION: u32 = 1;
pub const META_RECORD: &str = "__meta__";
pub const META_TAG: u8 = 0xFF;

/// One completed step of the training chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineageEntry {
    VaePretrain,
    Stage(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub lineage: Vec<LineageEntry>,
    /// Optimizer steps summed over the lineage.
    pub step: u64,
    pub seed: u64,
    /// Generator state at the end of the last run, `seed:stream:word_pos`.
    pub rng_state: String,
    /// Full run configuration that produced this checkpoint.
    pub run_config: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self { model, lineage: Vec::new(), step: 0, seed, rng_state: String::new(), run_config: serde_json::Value::Null }
    }

    pub fn vae_pretrained(&self) -> bool {
        self.lineage.contains(&LineageEntry::VaePretrain)
    }

    /// Highest completed stage, if any.
    pub fn last_stage(&self) -> Option<u8> {
        self.lineage.iter().rev().find_map(|e| match e {
            LineageEntry::Stage(s) => Some(*s),
            LineageEntry::VaePretrain => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &UnifiedModel<T>, meta: &CheckpointMeta) -> Self {
        Self { meta: meta.clone(), store: model.store.clone() }
    }

    /// Rebuilds the model described by the metadata and loads the weights.
    pub fn into_model(self) -> Result<(UnifiedModel<T>, CheckpointMeta)> {
        let mut model = UnifiedModel::new(self.meta.model, 0)?;
        model.store.load_from(&self.store)?;
        Ok((model, self.meta))
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn header(out: &mut Vec<u8>, name: &str, tag: u8, dims: &[usize]) -> Result<()> {
    let fits = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("{name}: size {v} exceeds u32")));
    push_u32(out, fits(name.len())?);
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    out.push(u8::try_from(dims.len()).map_err(|_| Error::Format(format!("{name}: rank too large")))?);
    for &d in dims {
        push_u32(out, fits(d)?);
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(ckpt.store.numel() * T::DTYPE.size_in_bytes() + 4096);
    push_u32(&mut payload, (ckpt.store.len() + 1) as u32);
    for p in ckpt.store.iter() {
        if p.name == META_RECORD {
            return Err(Error::Format(format!("parameter name {META_RECORD} is reserved")));
        }
        header(&mut payload, &p.name, T::DTYPE.tag(), p.tensor.shape())?;
        for &v in p.tensor.data() {
            v.write_le(&mut payload);
        }
    }
    let meta = serde_json::to_vec(&ckpt.meta)?;
    header(&mut payload, META_RECORD, META_TAG, &[meta.len()])?;
    payload.extend_from_slice(&meta);
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, crc32fast::hash(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses checkpoint bytes, converting stored values to `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let stored = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = &bytes[12..];
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Integrity(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    let mut meta = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| Error::Format(e.to_string()))?.to_string();
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if tag == META_TAG {
            if name != META_RECORD || rank != 1 {
                return Err(Error::Format("malformed metadata record".into()));
            }
            meta = Some(serde_json::from_slice::<CheckpointMeta>(r.take(n)?)?);
            continue;
        }
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("{name}: unknown dtype tag {tag}")))?;
        let width = dtype.size_in_bytes();
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        store.add(&name, Tensor::new(&dims, data)?, true)?;
    }
    if r.pos != payload.len() {
        return Err(Error::Format(format!("{} trailing bytes", payload.len() - r.pos)));
    }
    let meta = meta.ok_or_else(|| Error::Format("missing metadata record".into()))?;
    Ok(Checkpoint { meta, store })
}

/// Writes atomically through a temporary sibling file.
pub fn save<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut store = ParamStore::new();
        store.add("llm.embed", Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap(), true).unwrap();
        store.add("vae.latent_scale", Tensor::from_f64(&[1], &[0.5]).unwrap(), false).unwrap();
        let mut meta = CheckpointMeta::new(ModelConfig::toy(), 7);
        meta.lineage = vec![LineageEntry::VaePretrain, LineageEntry::Stage(0)];
        meta.step = 42;
        Checkpoint { meta, store }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = to_bytes(&c).unwrap();
        let back = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        for (a, b) in back.store.iter().zip(c.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ovu"), dir.path().join("b.ovu"));
        save(&sample(), &a).unwrap();
        save(&load::<f32>(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn any_payload_byte_flip_is_an_integrity_error() {
        let bytes = to_bytes(&sample()).unwrap();
        for i in 12..bytes.len() {
            let mut t = bytes.clone();
            t[i] ^= 0x01;
            assert!(matches!(from_bytes::<f32>(&t), Err(Error::Integrity(_))), "byte {i}");
        }
        let mut t = bytes.clone();
        t[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&t), Err(Error::Format(_))));
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let c = sample();
        let back = from_bytes::<f64>(&to_bytes(&c).unwrap()).unwrap();
        assert_eq!(back.store.by_name("llm.embed").unwrap().tensor.data()[1], -2.5);
    }
}
