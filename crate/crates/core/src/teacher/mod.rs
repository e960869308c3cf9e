//! Frozen teacher embeddings: the on-disk cache format, a synthetic teacher
//! for desk-scale experiments, and the pre-caching cost model.

mod cost;
mod synthetic;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::embedding::{l2_normalize, Embedding, Matrix};
use crate::error::{Error, Result};
use crate::io::write_atomic_with;

pub use cost::{estimate_precache_cost, CostModel, PrecacheReport};
pub use synthetic::{
    generate_synthetic_teacher, pseudo_word, synthetic_translations, LanguageShare,
    SyntheticTeacher, SyntheticTeacherSpec,
};

pub const CACHE_MAGIC: &[u8; 4] = b"NVTC";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F16,
    F32,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::F16 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Dtype::F16),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    Query,
    Document,
}

impl CacheKind {
    fn code(self) -> u8 {
        match self {
            CacheKind::Query => 0,
            CacheKind::Document => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(CacheKind::Query),
            1 => Some(CacheKind::Document),
            _ => None,
        }
    }
}

/// Bytes before the first record: magic, version, dim, dtype, count, kind.
pub const CACHE_HEADER_BYTES: usize = 4 + 4 + 4 + 1 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheHeader {
    pub version: u32,
    pub dim: u32,
    pub dtype: Dtype,
    pub count: u64,
    pub kind: CacheKind,
}

/// Immutable id → embedding store. Payload values are kept as binary32;
/// binary16 caches are widened on load, which is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    kind: CacheKind,
    dtype: Dtype,
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f32>,
}

impl TeacherCache {
    pub fn new(kind: CacheKind, dtype: Dtype, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("cache dim must be positive".into()));
        }
        Ok(Self {
            kind,
            dtype,
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
        })
    }

    /// Builds a cache from `(id, vector)` records, rejecting duplicate ids.
    pub fn from_records<'a, I>(kind: CacheKind, dtype: Dtype, dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let mut cache = Self::new(kind, dtype, dim)?;
        for (id, v) in records {
            cache.push(id, v)?;
        }
        Ok(cache)
    }

    /// Appends a record, rounding it through the cache dtype.
    pub fn push(&mut self, id: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.index.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        let dtype = self.dtype;
        self.values.extend(vector.iter().map(|&v| match dtype {
            Dtype::F16 => f16::from_f64(v).to_f32(),
            Dtype::F32 => v as f32,
        }));
        Ok(())
    }

    pub fn header(&self) -> CacheHeader {
        CacheHeader {
            version: CACHE_VERSION,
            dim: self.dim as u32,
            dtype: self.dtype,
            count: self.ids.len() as u64,
            kind: self.kind,
        }
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
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

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn raw(&self, id: &str) -> Result<&[f32]> {
        let i = *self
            .index
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))?;
        Ok(&self.values[i * self.dim..(i + 1) * self.dim])
    }

    /// The stored vector widened to binary64 and renormalized.
    pub fn embedding(&self, id: &str) -> Result<Embedding> {
        let raw = self.raw(id)?;
        l2_normalize(&raw.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
    }

    /// Normalized embeddings for `ids`, stacked as matrix rows.
    pub fn matrix(&self, ids: &[&str]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.embedding(id)?.as_slice());
        }
        Matrix::from_vec(ids.len(), self.dim, data)
    }

    /// Every record, normalized, in file order.
    pub fn embeddings(&self) -> Result<Vec<(String, Embedding)>> {
        self.ids
            .iter()
            .map(|id| Ok((id.clone(), self.embedding(id)?)))
            .collect()
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.ids.len() * self.dim * self.dtype.bytes()) as u64
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |f| {
            let mut w = LeWriter::new(BufWriter::new(f));
            let h = self.header();
            w.bytes(CACHE_MAGIC)?;
            w.u32(h.version)?;
            w.u32(h.dim)?;
            w.u8(h.dtype.code())?;
            w.u64(h.count)?;
            w.u8(h.kind.code())?;
            for (i, id) in self.ids.iter().enumerate() {
                w.str(id)?;
                for &v in &self.values[i * self.dim..(i + 1) * self.dim] {
                    match self.dtype {
                        Dtype::F16 => w.bytes(&f16::from_f32(v).to_le_bytes())?,
                        Dtype::F32 => w.f32(v)?,
                    }
                }
            }
            w.into_inner().into_inner().map_err(|e| e.into_error())?;
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
            .map_err(|msg| Error::CorruptCache(format!("{}: {msg}", path.display())))
    }

    pub fn read_header(path: &Path) -> Result<CacheHeader> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        read_header(&mut LeReader::new(BufReader::new(file)))
            .map_err(|msg| Error::CorruptCache(format!("{}: {msg}", path.display())))
    }

    fn read_from(r: impl Read) -> std::result::Result<Self, String> {
        let mut r = LeReader::new(r);
        let h = read_header(&mut r)?;
        let mut cache = TeacherCache::new(h.kind, h.dtype, h.dim as usize).map_err(|e| e.to_string())?;
        let dim = h.dim as usize;
        for _ in 0..h.count {
            let id = r.str()?;
            if cache.index.contains_key(&id) {
                return Err(format!("duplicate id {id:?}"));
            }
            cache.index.insert(id.clone(), cache.ids.len());
            cache.ids.push(id);
            for _ in 0..dim {
                let v = match h.dtype {
                    Dtype::F16 => f16::from_le_bytes(r.exact()?).to_f32(),
                    Dtype::F32 => r.f32()?,
                };
                cache.values.push(v);
            }
        }
        r.expect_eof()?;
        Ok(cache)
    }
}

fn read_header<R: Read>(r: &mut LeReader<R>) -> std::result::Result<CacheHeader, String> {
    if &r.exact::<4>()? != CACHE_MAGIC {
        return Err("bad magic, expected NVTC".into());
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dim = r.u32()?;
    if dim == 0 {
        return Err("dim must be positive".into());
    }
    let dtype = r.u8()?;
    let dtype = Dtype::from_code(dtype).ok_or_else(|| format!("unknown dtype code {dtype}"))?;
    let count = r.u64()?;
    let kind = r.u8()?;
    let kind = CacheKind::from_code(kind).ok_or_else(|| format!("unknown kind code {kind}"))?;
    Ok(CacheHeader {
        version,
        dim,
        dtype,
        count,
        kind,
    })
}
