//! Feature-provider files: pre-pooled backbone vectors keyed by query id.
//!
//! Layout (little-endian): magic `NVFP`, u32 version = 1, u32 dim, u64 count,
//! then per record a u32 id length, the UTF-8 id and `dim` binary32 values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::io::write_atomic_with;

pub const FEATURE_MAGIC: &[u8; 4] = b"NVFP";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f32>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn lookup(&self, id: &str) -> Result<&[f32]> {
        let i = *self
            .index
            .get(id)
            .ok_or_else(|| Error::MissingFeature(id.to_string()))?;
        Ok(&self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |f| {
            let mut w = LeWriter::new(BufWriter::new(f));
            w.bytes(FEATURE_MAGIC)?;
            w.u32(FEATURE_VERSION)?;
            w.u32(self.dim as u32)?;
            w.u64(self.ids.len() as u64)?;
            for (i, id) in self.ids.iter().enumerate() {
                w.str(id)?;
                for &v in &self.values[i * self.dim..(i + 1) * self.dim] {
                    w.f32(v)?;
                }
            }
            w.into_inner().into_inner().map_err(|e| e.into_error())?;
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|msg| {
            Error::CorruptCache(format!("{}: {msg}", path.display()))
        })
    }

    fn read_from(r: impl std::io::Read) -> std::result::Result<Self, String> {
        let mut r = LeReader::new(r);
        if &r.exact::<4>()? != FEATURE_MAGIC {
            return Err("bad magic, expected NVFP".into());
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err("dim must be positive".into());
        }
        let count = r.u64()?;
        let mut store = FeatureStore::new(dim);
        let mut row = vec![0f32; dim];
        for _ in 0..count {
            let id = r.str()?;
            for v in row.iter_mut() {
                *v = r.f32()?;
            }
            store.insert(id, &row).map_err(|e| e.to_string())?;
        }
        r.expect_eof()?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_missing() {
        let mut s = FeatureStore::new(3);
        s.insert("q1", &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.lookup("q1").unwrap(), &[1.0, 2.0, 3.0]);
        assert!(matches!(s.lookup("nope"), Err(Error::MissingFeature(_))));
        assert!(matches!(
            s.insert("q1", &[0.0; 3]),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            s.insert("q2", &[0.0; 2]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nvfp");
        let mut s = FeatureStore::new(4);
        s.insert("q1", &[f32::MIN_POSITIVE, -0.0, 1.0e-40, 3.5]).unwrap();
        s.insert("ünï", &[f32::MAX, 0.1, -7.25, 1.0 / 3.0]).unwrap();
        s.write(&path).unwrap();
        let back = FeatureStore::read(&path).unwrap();
        assert_eq!(back.ids(), s.ids());
        for id in s.ids() {
            let a: Vec<u32> = s.lookup(id).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.lookup(id).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nvfp");
        let mut s = FeatureStore::new(2);
        s.insert("q1", &[1.0, 2.0]).unwrap();
        s.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(FeatureStore::read(&path), Err(Error::CorruptCache(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(FeatureStore::read(&path), Err(Error::CorruptCache(_))));
    }
}
