//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "SMOTCKPT"
//! version u32
//! count   u32
//! entry*  name_len u32, name utf-8, ndim u32, dims u64*, values f64*
//! ```

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMOTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32().ok_or("truncated header")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32().ok_or("truncated entry")? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or("truncated name")?)
            .map_err(|e| e.to_string())?
            .to_string();
        let ndim = r.u32().ok_or("truncated entry")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or("truncated dims")?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8).ok_or_else(|| format!("truncated values for {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| e.to_string())?;
        store.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|d| Error::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_roundtrips(values in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..4) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.add("a.weight", Tensor::new(&[n], values.clone()).unwrap());
            store.add("b", Tensor::full(&[split, 2], 0.5));
            store.add("scalar", Tensor::scalar(values[0]));
            let back = decode_checkpoint(&encode_checkpoint(&store)).unwrap();
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full(&[3], 1.0));
        let bytes = encode_checkpoint(&store);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_checkpoint(&bad).unwrap_err(), "bad magic");
        assert_eq!(&bytes[..8], b"SMOTCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }
}
