use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use rand::Rng;

use crate::binio::{LeReader, LeWriter, ReadResult};
use crate::embedding::Matrix;
use crate::encoder::{EncoderConfig, StudentEncoder, StudentParams};
use crate::error::{Error, Result};
use crate::io::write_atomic_with;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters selected by validation loss. Tensors are stored as f64 so a
/// round trip is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub params: StudentParams,
    /// Number of parameter updates applied.
    pub step: u64,
    pub val_loss: f64,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn into_encoder(self) -> StudentEncoder {
        StudentEncoder {
            config: self.encoder,
            params: self.params,
        }
    }

    pub fn to_encoder(&self) -> StudentEncoder {
        self.clone().into_encoder()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if !self.val_loss.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "refusing to write checkpoint with val_loss {}",
                self.val_loss
            )));
        }
        let cfg = serde_json::to_string(&self.encoder).expect("encoder config serializes");
        write_atomic_with(path, |f| {
            let mut w = LeWriter::new(BufWriter::new(f));
            w.bytes(CHECKPOINT_MAGIC)?;
            w.u32(CHECKPOINT_VERSION)?;
            w.str(&self.config_digest)?;
            w.u64(self.step)?;
            w.f64(self.val_loss)?;
            w.str(&cfg)?;
            let p = &self.params;
            for m in [&p.backbone, &p.w1, &p.w2] {
                write_tensor(&mut w, m.rows(), m.cols(), m.as_slice())?;
            }
            for b in [&p.b1, &p.b2] {
                write_tensor(&mut w, 1, b.len(), b)?;
            }
            w.into_inner().into_inner().map_err(|e| e.into_error())?;
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        read_from(BufReader::new(file)).map_err(|msg| Error::CorruptCache(format!("{}: {msg}", path.display())))
    }
}

fn write_tensor<W: std::io::Write>(w: &mut LeWriter<W>, rows: usize, cols: usize, data: &[f64]) -> std::io::Result<()> {
    w.u64(rows as u64)?;
    w.u64(cols as u64)?;
    for &v in data {
        w.f64(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut LeReader<R>, rows: usize, cols: usize, name: &str) -> ReadResult<Vec<f64>> {
    let (got_r, got_c) = (r.u64()? as usize, r.u64()? as usize);
    if (got_r, got_c) != (rows, cols) {
        return Err(format!("{name}: shape {got_r}x{got_c}, expected {rows}x{cols}"));
    }
    (0..rows * cols).map(|_| r.f64()).collect()
}

fn read_from(r: impl Read) -> ReadResult<Checkpoint> {
    let mut r = LeReader::new(r);
    if &r.exact::<4>()? != CHECKPOINT_MAGIC {
        return Err("bad magic, expected NVCK".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let config_digest = r.str()?;
    let step = r.u64()?;
    let val_loss = r.f64()?;
    if !val_loss.is_finite() {
        return Err(format!("non-finite val_loss {val_loss}"));
    }
    let encoder: EncoderConfig = serde_json::from_str(&r.str()?).map_err(|e| format!("encoder config: {e}"))?;
    encoder.validate().map_err(|e| e.to_string())?;
    let mut params = StudentParams::zeros(&encoder);
    for (name, m) in [("backbone", &mut params.backbone), ("w1", &mut params.w1), ("w2", &mut params.w2)] {
        let data = read_tensor(&mut r, m.rows(), m.cols(), name)?;
        *m = Matrix::from_vec(m.rows(), m.cols(), data).map_err(|e| e.to_string())?;
    }
    for (name, b) in [("b1", &mut params.b1), ("b2", &mut params.b2)] {
        *b = read_tensor(&mut r, 1, b.len(), name)?;
    }
    r.expect_eof()?;
    Ok(Checkpoint {
        encoder,
        params,
        step,
        val_loss,
        config_digest,
    })
}

/// Fresh checkpoint around newly initialized parameters, for tests and tools.
pub fn initial_checkpoint<R: Rng + ?Sized>(encoder: EncoderConfig, rng: &mut R, digest: &str) -> Result<Checkpoint> {
    let enc = StudentEncoder::new(encoder, rng)?;
    Ok(Checkpoint {
        encoder: enc.config,
        params: enc.params,
        step: 0,
        val_loss: 0.0,
        config_digest: digest.to_string(),
    })
}
