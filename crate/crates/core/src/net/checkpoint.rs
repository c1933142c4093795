//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "RSENETCK"
//! version   u32       1
//! seed      u64
//! cfg_len   u32       followed by cfg_len bytes of NetworkConfig JSON (UTF-8)
//! n_arrays  u32
//! n_arrays times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim x u32 dims
//!   payload  prod(dims) x f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{build_network, ModelParams, NetworkConfig, ParamArray};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RSENETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointContents {
    pub config: NetworkConfig,
    pub seed: u64,
    pub arrays: BTreeMap<String, ParamArray>,
}

pub fn encode(model: &ModelParams) -> Vec<u8> {
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    let params = model.named_params();
    let mut out = Vec::with_capacity(64 + cfg.len() + 4 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format(path, "invalid UTF-8 in checkpoint"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<CheckpointContents> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not an RSE-Net checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let seed = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let config: NetworkConfig =
        serde_json::from_str(r.utf8(cfg_len)?).map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let n = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = r.utf8(name_len)?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        if arrays.insert(name.clone(), ParamArray { shape, data }).is_some() {
            return Err(Error::format(path, format!("duplicate array {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last array"));
    }
    Ok(CheckpointContents { config, seed, arrays })
}

pub fn read_arrays(path: &Path) -> Result<BTreeMap<String, ParamArray>> {
    Ok(read(path)?.arrays)
}

pub fn read(path: &Path) -> Result<CheckpointContents> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from checkpoint contents; the array set must match the
/// configured architecture exactly.
pub fn restore(contents: CheckpointContents, path: &Path) -> Result<ModelParams> {
    let mut model = build_network(&contents.config, contents.seed)?;
    let mut arrays = contents.arrays;
    for (name, slot) in model.params_mut() {
        let src = arrays
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing parameter {name}")))?;
        if src.shape != slot.shape {
            return Err(Error::format(
                path,
                format!("parameter {name} has shape {:?}, expected {:?}", src.shape, slot.shape),
            ));
        }
        *slot = src;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::format(path, format!("unexpected parameter {extra}")));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    restore(read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_structure_and_f32_values() {
        let m = build_network(&NetworkConfig::tiny(), 3).unwrap();
        let bytes = encode(&m);
        let back = restore(decode(&bytes, Path::new("m.ckpt")).unwrap(), Path::new("m.ckpt")).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.seed, 3);
        for ((na, a), (nb, b)) in m.named_params().iter().zip(back.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = build_network(&NetworkConfig::tiny(), 3).unwrap();
        let mut bytes = encode(&m);
        let p = Path::new("m.ckpt");
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes, p).is_err());
    }
}
