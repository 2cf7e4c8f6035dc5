use std::fs;
use std::path::Path;

use super::{Dataset, DatasetHeader};
use crate::dt::Trajectory;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRLT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let h = &ds.header;
    if h.obs_shape.contains(&0) || h.n_actions == 0 {
        return Err(Error::Config("dataset dimensions must be positive".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in h.obs_shape {
        put_u32(&mut out, d, "observation dimension")?;
    }
    put_u32(&mut out, h.n_actions, "action count")?;
    out.extend_from_slice(&(ds.trajectories.len() as u64).to_le_bytes());
    put_u32(&mut out, h.env_tag.len(), "tag length")?;
    out.extend_from_slice(h.env_tag.as_bytes());
    out.extend_from_slice(&h.frame_skip.to_le_bytes());
    for (i, t) in ds.trajectories.iter().enumerate() {
        if t.obs_shape != h.obs_shape {
            return Err(Error::dim(format!("trajectory {i} has observation shape {:?}", t.obs_shape)));
        }
        if let Some(a) = t.actions.iter().find(|&&a| a >= h.n_actions) {
            return Err(Error::Index(format!("trajectory {i} has action {a}")));
        }
        put_u32(&mut out, t.len(), "trajectory length")?;
        for v in &t.observations {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &a in &t.actions {
            out.extend_from_slice(&(a as u32).to_le_bytes());
        }
        for &r in &t.rewards {
            out.extend_from_slice(&(r as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, at: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::format(at as u64, msg))
    }
}

/// Parse a whole file image. Any defect yields a format error carrying the
/// byte offset; nothing is returned on failure.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic, expected DRLT");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let mut shape = [0usize; 3];
    for (i, d) in shape.iter_mut().enumerate() {
        let at = r.pos;
        *d = r.u32("observation dimension")? as usize;
        if *d == 0 {
            return r.fail(at, format!("observation dimension {i} is zero"));
        }
    }
    let at = r.pos;
    let n_actions = r.u32("action count")? as usize;
    if n_actions == 0 {
        return r.fail(at, "action count is zero");
    }
    let count = r.u64("trajectory count")?;
    let tag_len = r.u32("tag length")? as usize;
    let at = r.pos;
    let tag = std::str::from_utf8(r.take(tag_len, "environment tag")?)
        .map_err(|_| Error::format(at as u64, "environment tag is not UTF-8"))?
        .to_string();
    let frame_skip = r.u32("frame skip")?;

    let frame = shape[0] * shape[1] * shape[2];
    let mut trajectories = Vec::new();
    for i in 0..count {
        let t = r.u32("trajectory length")? as usize;
        let obs_bytes = t
            .checked_mul(frame)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(r.pos as u64, format!("trajectory {i} length overflows")))?;
        let raw = r.take(obs_bytes, "observations")?;
        let observations = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut actions = Vec::with_capacity(t);
        for _ in 0..t {
            let at = r.pos;
            let a = r.u32("action")? as usize;
            if a >= n_actions {
                return r.fail(at, format!("action {a} outside 0..{n_actions}"));
            }
            actions.push(a);
        }
        let raw = r.take(4 * t, "rewards")?;
        let rewards = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        trajectories.push(Trajectory::new(shape, observations, actions, rewards)?);
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Dataset {
        header: DatasetHeader {
            obs_shape: shape,
            n_actions,
            env_tag: tag,
            frame_skip,
        },
        trajectories,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
