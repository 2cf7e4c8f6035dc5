//! DRLC parameter checkpoints (little-endian):
//!
//! ```text
//! "DRLC" | version u32 | count u32
//! per entry: name_len u32 | name | rank u32 | dims u32 x rank | f64 data
//! ```

use std::path::Path;

use seqrl::tensorcore::{ParamStore, Tensor};
use seqrl::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRLC";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Named tensors in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected DRLC"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = c.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(at as u64, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let at = c.pos;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(at as u64, format!("`{name}` is too large")))?;
        let data = c
            .take(n, "tensor data")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Copy checkpoint values into a freshly built store with the same layout.
pub fn load_into(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(entries) {
        if store.name(id) != name || store.get(id).shape() != t.shape() {
            return Err(Error::Config(format!(
                "checkpoint entry `{name}` {:?} does not match model parameter `{}` {:?}",
                t.shape(),
                store.name(id),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}
