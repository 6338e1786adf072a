//! Versioned binary checkpoint: named f64 parameter blocks.
//!
//! Layout (little-endian): magic `DISA`, format version u32, block count
//! u32, then per block: name length u32, name bytes, shape rank u32,
//! dims u32 each, raw f64 values. Backbone, prompts and prototypes live
//! in separate named groups so prompts can be swapped against a fixed
//! backbone.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DISA";
const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.blocks.insert(name.into(), (shape, values));
    }

    pub fn insert_tensors(&mut self, named: BTreeMap<String, Tensor>) {
        for (name, t) in named {
            self.insert(name, t.shape().to_vec(), t.values().to_vec());
        }
    }

    pub fn insert_blocks(&mut self, blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)>) {
        self.blocks.extend(blocks);
    }

    /// Blocks whose name starts with `prefix`, as their own map.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.blocks
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, (shape, values)) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Checkpoint> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if data.len() - *pos < n {
                return Err(Error::Checkpoint("file truncated".into()));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = read_u32(&mut pos)? as usize;
        let mut blocks = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("block name not utf-8".into()))?;
            let rank = read_u32(&mut pos)? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = read_u32(&mut pos)? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
                shape.push(d);
            }
            if data.len() - pos < numel.saturating_mul(8) {
                return Err(Error::Checkpoint("file truncated".into()));
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            if blocks.insert(name.clone(), (shape, values)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate block {name:?}")));
            }
        }
        Ok(Checkpoint { blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut ck = Checkpoint::new();
        ck.insert("prompts.visual.0", vec![2, 3], vec![1.0, -2.0, 0.5, 3.25, -0.125, 9.0]);
        ck.insert("image.proj", vec![3], vec![0.1, 0.2, 0.3]);
        ck.insert("scalar", vec![], vec![7.0]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn group_selects_by_prefix() {
        let mut ck = Checkpoint::new();
        ck.insert("prompts.visual.0", vec![1], vec![1.0]);
        ck.insert("image.embed", vec![1], vec![2.0]);
        let g = ck.group("prompts.");
        assert_eq!(g.len(), 1);
        assert!(g.contains_key("prompts.visual.0"));
    }

    #[test]
    fn malformed_inputs_are_errors_not_panics() {
        assert!(Checkpoint::from_bytes(b"").is_err());
        assert!(Checkpoint::from_bytes(b"BAD!").is_err());
        let mut ck = Checkpoint::new();
        ck.insert("x", vec![4], vec![0.0; 4]);
        let bytes = ck.to_bytes();
        for cut in [5, 9, 13, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        // huge declared dim must not allocate
        let mut evil = Vec::new();
        evil.extend_from_slice(b"DISA");
        evil.extend_from_slice(&1u32.to_le_bytes());
        evil.extend_from_slice(&1u32.to_le_bytes());
        evil.extend_from_slice(&1u32.to_le_bytes());
        evil.push(b'x');
        evil.extend_from_slice(&2u32.to_le_bytes());
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&evil).is_err());
    }
}
