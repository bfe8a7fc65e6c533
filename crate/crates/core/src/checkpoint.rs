//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `magic[8] | version u32 | config hash [32] | meta count u32 | meta entries
//! | section count u32 | sections`. A meta entry is two length-prefixed UTF-8
//! strings; a section is a length-prefixed name, `rows u32`, `cols u32` and
//! `rows·cols` raw `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::ParameterStore;

const MAGIC: &[u8; 8] = b"PRLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub type ConfigHash = [u8; 32];

/// SHA-256 of a configuration's canonical text form.
pub fn config_hash(canonical: &str) -> ConfigHash {
    Sha256::digest(canonical.as_bytes()).into()
}

pub fn hash_hex(hash: &ConfigHash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: ConfigHash,
    meta: BTreeMap<String, String>,
    sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(config_hash: ConfigHash) -> Self {
        Self {
            config_hash,
            meta: BTreeMap::new(),
            sections: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta entry {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("meta entry {key:?} has malformed value {raw:?}")))
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Stores `data` as single precision.
    pub fn add_values(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) {
        debug_assert_eq!(rows * cols, data.len());
        self.sections.push(Section {
            name: name.to_string(),
            rows,
            cols,
            data: data.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.section(name)?.data.iter().map(|&v| v as f64).collect())
    }

    /// One section per tensor, named `prefix/tensor`.
    pub fn add_store(&mut self, prefix: &str, store: &ParameterStore) {
        for spec in store.specs() {
            let data = &store.values()[spec.offset..spec.offset + spec.len()];
            self.add_values(&format!("{prefix}/{}", spec.name), spec.rows, spec.cols, data);
        }
    }

    /// Overwrites every tensor of `store` from the matching sections.
    pub fn restore_store(&self, prefix: &str, store: &mut ParameterStore) -> Result<()> {
        let specs = store.specs().to_vec();
        for spec in specs {
            let name = format!("{prefix}/{}", spec.name);
            let section = self.section(&name)?;
            if section.rows != spec.rows || section.cols != spec.cols {
                return Err(Error::Checkpoint(format!(
                    "section {name:?} has shape [{}, {}], model expects [{}, {}]",
                    section.rows, section.cols, spec.rows, spec.cols
                )));
            }
            for (dst, &src) in store.values_mut()[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&section.data)
            {
                *dst = src as f64;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.sections.len());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            put_u32(&mut out, s.rows);
            put_u32(&mut out, s.cols);
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a blob; with `expected` set, a differing config hash is an error.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ConfigHash>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        if let Some(want) = expected {
            if *want != config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {}, current {}",
                    hash_hex(&config_hash),
                    hash_hex(want)
                )));
            }
        }
        let mut ckpt = Self::new(config_hash);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ckpt.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("section {name:?} too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.sections.push(Section { name, rows, cols, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last section".into()));
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file first, then renames over `path`,
    /// so a failed write never clobbers an existing checkpoint.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path, expected: Option<&ConfigHash>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_bytes(&bytes, expected)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_check() {
        let h = config_hash("a=1");
        let mut c = Checkpoint::new(h);
        c.set_meta("iteration", 7);
        c.add_values("w", 2, 2, &[1.0, -2.5, 0.125, 3.0]);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Some(&h)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_parse::<u64>("iteration").unwrap(), 7);
        let other = config_hash("a=2");
        assert!(matches!(Checkpoint::from_bytes(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], None).is_err());
    }
}
