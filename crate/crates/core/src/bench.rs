//! Deployment-cost measurements: query-encoding latency, scoring latency
//! against N candidates, and index storage.
//!
//! Timings run on the calling thread only. Absolute numbers depend on the
//! host; compare them within one report, not across machines.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward, tokenize, EncoderInput, StudentEncoder};
use crate::error::{Error, Result};
use crate::eval::{format_table, top_k};

pub const MIN_REPETITIONS: usize = 30;
pub const MIN_WARMUP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSpec {
    pub num_docs: u64,
    pub dim: u64,
    pub tokens_per_doc: u64,
    /// 2 for binary16, 4 for binary32.
    pub dtype_bytes: u64,
}

impl StorageSpec {
    pub fn single_vector_f32(num_docs: u64, dim: u64) -> Self {
        Self {
            num_docs,
            dim,
            tokens_per_doc: 1,
            dtype_bytes: 4,
        }
    }

    pub fn multi_vector_f16(num_docs: u64, dim: u64, tokens_per_doc: u64) -> Self {
        Self {
            num_docs,
            dim,
            tokens_per_doc,
            dtype_bytes: 2,
        }
    }
}

/// `num_docs × tokens_per_doc × dim × dtype_bytes`, exact.
pub fn index_storage_bytes(spec: &StorageSpec) -> Result<u64> {
    let fields = [
        ("num_docs", spec.num_docs),
        ("dim", spec.dim),
        ("tokens_per_doc", spec.tokens_per_doc),
        ("dtype_bytes", spec.dtype_bytes),
    ];
    let zero: Vec<&str> = fields.iter().filter(|(_, v)| *v == 0).map(|(n, _)| *n).collect();
    if !zero.is_empty() {
        return Err(Error::InvalidBenchConfig(format!("must be positive: {}", zero.join(", "))));
    }
    if !matches!(spec.dtype_bytes, 2 | 4) {
        return Err(Error::InvalidBenchConfig(format!(
            "dtype_bytes must be 2 or 4, got {}",
            spec.dtype_bytes
        )));
    }
    spec.num_docs
        .checked_mul(spec.tokens_per_doc)
        .and_then(|v| v.checked_mul(spec.dim))
        .and_then(|v| v.checked_mul(spec.dtype_bytes))
        .ok_or_else(|| Error::InvalidBenchConfig("index size overflows u64".into()))
}

/// Decimal gigabytes.
pub fn bytes_to_gb(bytes: u64) -> f64 {
    bytes as f64 / 1e9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: MIN_REPETITIONS,
            warmup: MIN_WARMUP,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.repetitions < MIN_REPETITIONS {
            v.push(format!(
                "repetitions must be >= {MIN_REPETITIONS}, got {}",
                self.repetitions
            ));
        }
        if self.warmup < MIN_WARMUP {
            v.push(format!("warmup must be >= {MIN_WARMUP}, got {}", self.warmup));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidBenchConfig(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub operation: String,
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub environment: String,
    /// The timed loop had nothing to do (empty index).
    pub empty_scan: bool,
}

/// Host description attached to every report.
pub fn environment() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{} ({cpus} cpus available, 1 used), {} build",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Runs `warmup` discarded calls, then times `repetitions` calls of `f(rep)`.
pub fn measure<F: FnMut(usize)>(operation: &str, cfg: &BenchConfig, mut f: F) -> Result<LatencyReport> {
    cfg.validate()?;
    for i in 0..cfg.warmup {
        f(i);
    }
    let mut samples: Vec<f64> = (0..cfg.repetitions)
        .map(|i| {
            let t = Instant::now();
            f(i);
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(|a, b| a.total_cmp(b));
    Ok(LatencyReport {
        operation: operation.to_string(),
        batch_size: 1,
        repetitions: cfg.repetitions,
        warmup: cfg.warmup,
        median_ms: median(&samples),
        mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        p95_ms: percentile(&samples, 95.0),
        min_ms: samples[0],
        max_ms: samples[samples.len() - 1],
        environment: environment(),
        empty_scan: false,
    })
}

/// Tokenize-and-forward latency for single queries, cycling through `queries`.
pub fn bench_encode(encoder: &StudentEncoder, queries: &[String], cfg: &BenchConfig) -> Result<LatencyReport> {
    if queries.is_empty() {
        return Err(Error::InvalidBenchConfig("no sample queries".into()));
    }
    // Fail early on queries that cannot be encoded rather than inside the timer.
    for q in queries {
        encoder.encode_text(q)?;
    }
    let label = format!(
        "encode(hidden={}, projector={}, out={})",
        encoder.config.hidden_dim, encoder.config.projector_dim, encoder.config.output_dim
    );
    measure(&label, cfg, |i| {
        let q = &queries[i % queries.len()];
        let ids = tokenize(q, &encoder.config.tokenizer).expect("checked above");
        let tape = forward(&encoder.params, &EncoderInput::Tokens(ids)).expect("checked above");
        black_box(tape.output);
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    Cosine,
    MaxSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringBenchSpec {
    pub num_docs: usize,
    pub dim: usize,
    /// Ignored for cosine scoring.
    pub tokens_per_doc: usize,
    /// Ignored for cosine scoring.
    pub query_tokens: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for ScoringBenchSpec {
    fn default() -> Self {
        Self {
            num_docs: 1000,
            dim: 128,
            tokens_per_doc: 1,
            query_tokens: 16,
            top_k: 10,
            seed: 42,
        }
    }
}

/// Scoring and top-k selection, timed separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringReport {
    pub mode: ScoringMode,
    pub spec: ScoringBenchSpec,
    pub scoring: LatencyReport,
    pub top_k: LatencyReport,
}

/// Row-major unit vectors in f32.
pub fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of `query` with every row of `index`.
pub fn cosine_scan(query: &[f32], index: &[f32], dim: usize, out: &mut Vec<f32>) {
    out.clear();
    out.extend(index.chunks_exact(dim).map(|d| dot_f32(query, d)));
}

/// MaxSim of `query` (token rows) against each document of `tokens_per_doc` rows.
pub fn maxsim_scan(query: &[f32], index: &[f32], dim: usize, tokens_per_doc: usize, out: &mut Vec<f32>) {
    out.clear();
    for doc in index.chunks_exact(dim * tokens_per_doc) {
        let mut total = 0.0f32;
        for q in query.chunks_exact(dim) {
            let best = doc
                .chunks_exact(dim)
                .map(|d| dot_f32(q, d))
                .fold(f32::NEG_INFINITY, f32::max);
            total += best;
        }
        out.push(total);
    }
}

pub fn bench_scoring(mode: ScoringMode, spec: &ScoringBenchSpec, cfg: &BenchConfig) -> Result<ScoringReport> {
    cfg.validate()?;
    if spec.dim == 0 {
        return Err(Error::InvalidBenchConfig("dim must be positive".into()));
    }
    let (doc_rows, query_rows) = match mode {
        ScoringMode::Cosine => (1, 1),
        ScoringMode::MaxSim => {
            if spec.tokens_per_doc == 0 || spec.query_tokens == 0 {
                return Err(Error::InvalidBenchConfig(
                    "tokens_per_doc and query_tokens must be positive for maxsim".into(),
                ));
            }
            (spec.tokens_per_doc, spec.query_tokens)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let query = random_unit_rows(&mut rng, query_rows, spec.dim);
    let index = random_unit_rows(&mut rng, spec.num_docs * doc_rows, spec.dim);
    let ids: Vec<String> = (0..spec.num_docs).map(|i| format!("d{i:07}")).collect();

    let label = match mode {
        ScoringMode::Cosine => format!("cosine(N={}, dim={})", spec.num_docs, spec.dim),
        ScoringMode::MaxSim => format!(
            "maxsim(N={}, dim={}, doc_tokens={}, query_tokens={})",
            spec.num_docs, spec.dim, spec.tokens_per_doc, spec.query_tokens
        ),
    };
    let mut scores = Vec::with_capacity(spec.num_docs);
    let mut scoring = measure(&label, cfg, |_| {
        match mode {
            ScoringMode::Cosine => cosine_scan(&query, &index, spec.dim, &mut scores),
            ScoringMode::MaxSim => maxsim_scan(&query, &index, spec.dim, spec.tokens_per_doc, &mut scores),
        }
        black_box(&scores);
    })?;
    let wide: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
    let mut top = measure(&format!("top{}(N={})", spec.top_k, spec.num_docs), cfg, |_| {
        black_box(top_k(&ids, &wide, spec.top_k));
    })?;
    if spec.num_docs == 0 {
        scoring.empty_scan = true;
        top.empty_scan = true;
    }
    Ok(ScoringReport {
        mode,
        spec: *spec,
        scoring,
        top_k: top,
    })
}

pub fn reports_table(reports: &[LatencyReport]) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "operation".into(),
        "median ms".into(),
        "mean ms".into(),
        "p95 ms".into(),
        "reps".into(),
    ]];
    for r in reports {
        let op = if r.empty_scan {
            format!("{} [empty scan]", r.operation)
        } else {
            r.operation.clone()
        };
        rows.push([
            op,
            format!("{:.4}", r.median_ms),
            format!("{:.4}", r.mean_ms),
            format!("{:.4}", r.p95_ms),
            r.repetitions.to_string(),
        ]);
    }
    format_table(&rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn reports_csv(reports: &[LatencyReport]) -> String {
    let mut out =
        String::from("operation,batch_size,repetitions,warmup,median_ms,mean_ms,p95_ms,min_ms,max_ms,empty_scan,environment\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.operation),
            r.batch_size,
            r.repetitions,
            r.warmup,
            r.median_ms,
            r.mean_ms,
            r.p95_ms,
            r.min_ms,
            r.max_ms,
            r.empty_scan,
            csv_field(&r.environment)
        );
    }
    out
}
