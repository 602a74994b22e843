//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PTCKPT\0\0" | version u32
//! config_len u64 | config JSON
//! state_len u64  | state JSON
//! entry_count u32
//! per entry: name_len u32 | name | ndim u32 | dims u64 * ndim | f32 data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"PTCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config_json: String,
    pub state_json: String,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for text in [&self.config_json, &self.state_json] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.error(0, "not a checkpoint file".into()));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(r.error(8, format!("unsupported format version {version}")));
        }
        let config_json = r.string_u64("config")?;
        let state_json = r.string_u64("state")?;
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32("entry name length")? as usize;
            let name = r.utf8(len, "entry name")?;
            let ndim = r.u32("entry rank")?;
            let shape = (0..ndim)
                .map(|_| r.u64("entry dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.error(r.pos, "entry too large".into()))?, "entry data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after last entry".into()));
        }
        Ok(Self { config_json, state_json, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn find(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(prefix))
    }

    /// Append every parameter of `store` as `{prefix}{name}`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for p in store.iter() {
            self.entries.push(Entry {
                name: format!("{prefix}{}", p.name),
                shape: p.shape.clone(),
                data: p.data.clone(),
            });
        }
    }

    /// Overwrite every parameter of `store` from `{prefix}{name}` entries.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for p in store.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let e = self
                .find(&key)
                .ok_or_else(|| Error::Mismatch(format!("checkpoint has no entry {key}")))?;
            if e.shape != p.shape {
                return Err(Error::Mismatch(format!(
                    "entry {key} has shape {:?}, model expects {:?}",
                    e.shape, p.shape
                )));
            }
            p.data.copy_from_slice(&e.data);
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, msg: String) -> Error {
        Error::Format { offset: offset as u64, msg }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error(start, format!("{what} is not UTF-8")))
    }

    fn string_u64(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)?;
        let len = usize::try_from(len).map_err(|_| self.error(self.pos, format!("{what} too large")))?;
        self.utf8(len, what)
    }
}
