//! Binary checkpoints.
//!
//! ```text
//! "TTCKPT1" | u64 header_len | header JSON {config, vocab}
//! u64 param_count | per param: u32 id_len, id, u32 ndim, u64 dims.., f64 values..
//! ```
//!
//! All integers and floats are little-endian; values are row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};
use crate::table_encoder::Vocabulary;

use super::{Model, RunConfig};

pub const MAGIC: &[u8; 7] = b"TTCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vocabulary,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
    })?;
    let mut out = Vec::with_capacity(header.len() + 8 * model.store.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for p in model.store.iter() {
        out.extend_from_slice(&(p.id.len() as u32).to_le_bytes());
        out.extend_from_slice(p.id.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint and checks that its parameters match a freshly built
/// model for the stored config.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let header_len = r.u64()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = Model::new(header.config, header.vocab)?;
    let count = r.u64()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, config expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let id_len = r.u32()?;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Checkpoint("parameter id is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("shape {shape:?} overflows")))?;
        if numel * 8 > bytes.len() {
            return Err(Error::Checkpoint(format!("shape {shape:?} exceeds file size")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model
            .store
            .set_value(&id, t)
            .map_err(|e| Error::Checkpoint(format!("parameter `{id}`: {e}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

/// Copies values from `src` into a store with the same ids and shapes.
pub fn copy_values(src: &ParameterStore, dst: &mut ParameterStore) -> Result<()> {
    for p in src.iter() {
        dst.set_value(&p.id, p.value.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let cfg = RunConfig {
            d: 4,
            d_prime: 8,
            heads: 2,
            ffn_width: 8,
            ..RunConfig::default()
        };
        Model::new(cfg, Vocabulary::build(["x", "y"])).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..7], b"TTCKPT1");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.config, m.config);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(matches!(from_bytes(b"NOPE"), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Checkpoint(_))));
    }
}
