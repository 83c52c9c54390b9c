//! Self-describing checkpoint container.
//!
//! Layout: the 8 magic bytes `OELABCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the header as compact JSON
//! with sorted keys, then every parameter block as raw little-endian `f32`.
//!
//! ```text
//! {"blocks":[{"len":..,"name":..,"offset":..,"shape":[..]},..],
//!  "config":{..},"format_version":1,"step":..}
//! ```
//! `offset` and `len` count `f32` values from the start of the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"OELABCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: serde_json::Value,
    pub blocks: Vec<ParamBlock>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: usize,
    config: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_stores(step: usize, config: &impl Serialize, stores: &[&ParamStore<f32>]) -> Result<Self> {
        let blocks =
            stores.iter().flat_map(|s| s.iter()).map(|(_, p)| ParamBlock { name: p.name.clone(), shape: p.shape.clone(), data: p.data.clone() }).collect();
        Ok(Self { step, config: serde_json::to_value(config)?, blocks })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let h = BlockHeader { name: b.name.clone(), shape: b.shape.clone(), offset, len: b.data.len() };
                offset += b.data.len();
                h
            })
            .collect();
        let header = Header { format_version: FORMAT_VERSION, step: self.step, config: self.config.clone(), blocks };
        // round-trip through Value so object keys come out sorted
        let header = serde_json::to_value(&header).expect("header serializes").to_string();
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for b in &self.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data = bytes.get(20 + hlen..).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..20 + hlen])?;
        if header.format_version != version {
            return Err(corrupt("header and preamble disagree on format version"));
        }
        let total: usize = header.blocks.iter().map(|b| b.len).sum();
        if data.len() != total * 4 {
            return Err(corrupt(format!("data section has {} bytes, header describes {}", data.len(), total * 4)));
        }
        let blocks = header
            .blocks
            .into_iter()
            .map(|b| {
                if b.shape.iter().product::<usize>() != b.len {
                    return Err(corrupt(format!("block `{}` shape {:?} does not match length {}", b.name, b.shape, b.len)));
                }
                let raw = &data[b.offset * 4..(b.offset + b.len) * 4];
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Ok(ParamBlock { name: b.name, shape: b.shape, data })
            })
            .collect::<Result<_>>()?;
        Ok(Self { step: header.step, config: header.config, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        serde_json::from_value(self.config.clone()).map_err(|e| corrupt(format!("embedded config: {e}")))
    }

    /// Copies every matching block (by name) into `store`; all of the store's
    /// parameters must be present with matching shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (_, p) in store.iter_mut() {
            let b = self.blocks.iter().find(|b| b.name == p.name).ok_or_else(|| corrupt(format!("missing block `{}`", p.name)))?;
            if b.shape != p.shape {
                return Err(corrupt(format!("block `{}` has shape {:?}, model expects {:?}", p.name, b.shape, p.shape)));
            }
            p.data.copy_from_slice(&b.data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", &[2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0], true);
        s.add("a.b", &[3], vec![0.5; 3], false);
        Checkpoint::from_stores(4, &serde_json::json!({"z": 1, "a": [1.5, 2]}), &[&s]).unwrap()
    }

    #[test]
    fn bytes_round_trip_identically() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[20..20 + hlen]).unwrap();
        assert!(header.starts_with(r#"{"blocks":[{"len":6,"name":"a.w","offset":0,"shape":[2,3]}"#), "{header}");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let c = sample();
        let mut s = ParamStore::<f32>::new();
        s.zeros("a.b", &[3], false);
        c.restore_into(&mut s).unwrap();
        assert_eq!(s.get(crate::params::ParamId(0)).data, vec![0.5; 3]);
        let mut wrong = ParamStore::<f32>::new();
        wrong.zeros("a.w", &[3, 2], true);
        assert!(c.restore_into(&mut wrong).is_err());
        let mut missing = ParamStore::<f32>::new();
        missing.zeros("c", &[1], true);
        assert!(c.restore_into(&mut missing).is_err());
    }
}
