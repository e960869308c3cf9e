//! Little-endian helpers shared by the cache, feature and checkpoint formats.

use std::io::{self, Read, Write};

pub(crate) struct LeWriter<W: Write> {
    inner: W,
}

impl<W: Write> LeWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) -> io::Result<()> {
        let len = u32::try_from(s.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string too long"))?;
        self.u32(len)?;
        self.bytes(s.as_bytes())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Reader whose failures are reported as plain strings so each format can
/// wrap them in its own corruption error.
pub(crate) struct LeReader<R: Read> {
    inner: R,
}

pub(crate) type ReadResult<T> = std::result::Result<T, String>;

impl<R: Read> LeReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn exact<const N: usize>(&mut self) -> ReadResult<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(describe)?;
        Ok(buf)
    }

    pub fn vec(&mut self, n: usize) -> ReadResult<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(describe)?;
        if buf.len() != n {
            return Err("unexpected end of file".into());
        }
        Ok(buf)
    }

    pub fn u8(&mut self) -> ReadResult<u8> {
        Ok(self.exact::<1>()?[0])
    }

    pub fn u32(&mut self) -> ReadResult<u32> {
        Ok(u32::from_le_bytes(self.exact()?))
    }

    pub fn u64(&mut self) -> ReadResult<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }

    pub fn f32(&mut self) -> ReadResult<f32> {
        Ok(f32::from_le_bytes(self.exact()?))
    }

    pub fn f64(&mut self) -> ReadResult<f64> {
        Ok(f64::from_le_bytes(self.exact()?))
    }

    pub fn str(&mut self) -> ReadResult<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.vec(len)?).map_err(|e| format!("invalid UTF-8: {e}"))
    }

    /// Succeeds only if no bytes remain.
    pub fn expect_eof(&mut self) -> ReadResult<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err("trailing bytes after last record".into()),
            Err(e) => Err(describe(e)),
        }
    }
}

fn describe(e: io::Error) -> String {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        "unexpected end of file".into()
    } else {
        e.to_string()
    }
}
