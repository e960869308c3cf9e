//! Dense vector primitives: normalization, similarity, tempered softmax and
//! the log-sum-exp the losses are built on.
//!
//! All arithmetic here is binary64. Stored embeddings are narrowed to
//! binary32/binary16 only at file boundaries (see [`crate::teacher`]).

use crate::error::{Error, Result};

/// Slack allowed on the unit-norm invariant of a normalized embedding.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// A dense vector, optionally known to have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    /// Wraps raw values without normalizing. Rejects empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// Wraps values that are already unit norm, verifying the claim.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        let n = norm(&values);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::DegenerateInput(format!(
                "vector claimed unit norm but has norm {n}"
            )));
        }
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn normalized(&self) -> Result<Embedding> {
        if self.normalized {
            return Ok(self.clone());
        }
        l2_normalize(&self.values)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("empty vector".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(format!(
            "non-finite entry at index {i}"
        )));
    }
    Ok(())
}

/// A per-token matrix of unit vectors, as stored for late-interaction documents.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVector {
    rows: Vec<Embedding>,
}

impl MultiVector {
    pub fn new(rows: Vec<Embedding>) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyBatch)?;
        let dim = first.dim();
        for row in &rows {
            if row.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: row.dim(),
                });
            }
            if !row.is_normalized() {
                return Err(Error::DegenerateInput(
                    "multi-vector rows must be normalized".into(),
                ));
            }
        }
        Ok(Self { rows })
    }

    /// Normalizes every raw row and builds the multi-vector.
    pub fn from_raw(rows: &[Vec<f64>]) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|r| l2_normalize(r))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn token_count(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].dim()
    }

    pub fn rows(&self) -> &[Embedding] {
        &self.rows
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().ok_or(Error::EmptyBatch)?.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · other^T`, i.e. all pairwise row dot products.
    pub fn mul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                got: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.set(i, j, dot(a, other.row(j)));
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit L2 norm. Zero vectors are refused, never mapped to zero.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    check_finite(v)?;
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize vector with norm {n}"
        )));
    }
    Ok(Embedding {
        values: v.iter().map(|x| x / n).collect(),
        normalized: true,
    })
}

/// Cosine similarity. On normalized inputs this is the plain dot product.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let d = if a.normalized && b.normalized {
        dot(&a.values, &b.values)
    } else {
        dot(&a.values, &b.values) / (norm(&a.values) * norm(&b.values))
    };
    Ok(d.clamp(-1.0, 1.0))
}

/// `log Σ exp(x_i)` with max-shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log softmax(scores / tau)`, computed without ever taking `log(0)`.
pub fn tempered_log_softmax(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.into_iter().map(|s| s - lse).collect())
}

/// `softmax(scores / tau)`, max-shifted so that small temperatures cannot overflow.
pub fn tempered_softmax(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::DegenerateInput(format!(
            "non-finite score at index {i}"
        )));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub(crate) fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// Stacks embeddings as the rows of a matrix.
pub fn stack_batch(embs: &[Embedding]) -> Result<Matrix> {
    let first = embs.first().ok_or(Error::EmptyBatch)?;
    let dim = first.dim();
    let mut data = Vec::with_capacity(embs.len() * dim);
    for e in embs {
        if e.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        data.extend_from_slice(e.as_slice());
    }
    Matrix::from_vec(embs.len(), dim, data)
}
