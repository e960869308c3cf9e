//! Retrieval scoring and metrics: exhaustive cosine and MaxSim scoring,
//! NDCG@k, teacher-retention reports and Pearson correlation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::QueryRecord;
use crate::embedding::{dot, Embedding, Matrix, MultiVector};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};

/// Cutoff used throughout reporting.
pub const NDCG_CUTOFF: usize = 5;

/// Relevance judgments: query id → (doc id → grade).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrelRecord {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u32,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grades(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Queries without any positive grade (they violate the qrels invariant).
    pub fn queries_without_positives(&self) -> Vec<String> {
        self.judgments
            .iter()
            .filter(|(_, m)| m.values().all(|&g| g == 0))
            .map(|(q, _)| q.clone())
            .collect()
    }

    pub fn records(&self) -> Vec<QrelRecord> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| {
                m.iter().map(move |(d, &g)| QrelRecord {
                    query_id: q.clone(),
                    doc_id: d.clone(),
                    grade: g,
                })
            })
            .collect()
    }

    pub fn from_records(records: &[QrelRecord]) -> Self {
        let mut q = Qrels::default();
        for r in records {
            q.insert(&r.query_id, &r.doc_id, r.grade);
        }
        q
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::from_records(&read_jsonl(path)?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records())
    }
}

/// Descending score, ties broken by ascending doc id.
fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Top-`k` documents by score with deterministic tie-breaking.
pub fn top_k(doc_ids: &[String], scores: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&i: &usize, &j: &usize| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then_with(|| doc_ids[i].cmp(&doc_ids[j]))
    };
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.into_iter()
        .map(|i| (doc_ids[i].clone(), scores[i]))
        .collect()
}

/// Per-query ranked lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalRun {
    ranked: BTreeMap<String, Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub query_id: String,
    pub ranked: Vec<(String, f64)>,
}

impl RetrievalRun {
    /// Inserts a ranked list, re-sorting it and rejecting duplicates or
    /// non-finite scores.
    pub fn insert(&mut self, query_id: &str, mut ranked: Vec<(String, f64)>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (d, s) in &ranked {
            if !s.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "non-finite score for {query_id}/{d}"
                )));
            }
            if !seen.insert(d.as_str()) {
                return Err(Error::DuplicateId(format!("{query_id}/{d}")));
            }
        }
        ranked.sort_by(rank_order);
        self.ranked.insert(query_id.to_string(), ranked);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.ranked.get(query_id).map(Vec::as_slice)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn records(&self) -> Vec<RunRecord> {
        self.ranked
            .iter()
            .map(|(q, r)| RunRecord {
                query_id: q.clone(),
                ranked: r.clone(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<RunRecord>) -> Result<Self> {
        let mut run = RetrievalRun::default();
        for r in records {
            if run.ranked.contains_key(&r.query_id) {
                return Err(Error::DuplicateId(r.query_id));
            }
            run.insert(&r.query_id, r.ranked)?;
        }
        Ok(run)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_records(read_jsonl(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records())
    }
}

/// `score[j] = query · doc_j`, exhaustively.
pub fn score_cosine(query: &Embedding, index: &[Embedding]) -> Result<Vec<f64>> {
    index
        .iter()
        .map(|d| {
            if d.dim() != query.dim() {
                return Err(Error::DimMismatch {
                    expected: query.dim(),
                    got: d.dim(),
                });
            }
            Ok(dot(query.as_slice(), d.as_slice()))
        })
        .collect()
}

/// Late-interaction score: Σ over query tokens of the best dot product with
/// any document token.
pub fn score_maxsim(query: &MultiVector, doc: &MultiVector) -> Result<f64> {
    if query.dim() != doc.dim() {
        return Err(Error::DimMismatch {
            expected: query.dim(),
            got: doc.dim(),
        });
    }
    Ok(query
        .rows()
        .iter()
        .map(|q| {
            doc.rows()
                .iter()
                .map(|d| dot(q.as_slice(), d.as_slice()))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum())
}

/// Single-vector document index.
#[derive(Debug, Clone)]
pub struct DocIndex {
    ids: Vec<String>,
    vectors: Matrix,
}

impl DocIndex {
    pub fn new(docs: Vec<(String, Embedding)>) -> Result<Self> {
        if docs.is_empty() {
            return Ok(Self {
                ids: Vec::new(),
                vectors: Matrix::zeros(0, 0),
            });
        }
        let embs: Vec<Embedding> = docs.iter().map(|(_, e)| e.clone()).collect();
        let vectors = crate::embedding::stack_batch(&embs)?;
        Ok(Self {
            ids: docs.into_iter().map(|(i, _)| i).collect(),
            vectors,
        })
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

    pub fn scores(&self, query: &Embedding) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim() != self.vectors.cols() {
            return Err(Error::DimMismatch {
                expected: self.vectors.cols(),
                got: query.dim(),
            });
        }
        Ok(self
            .vectors
            .iter_rows()
            .map(|d| dot(query.as_slice(), d))
            .collect())
    }

    /// Ranks every query against the index, keeping `depth` documents each.
    pub fn retrieve(&self, queries: &[(String, Embedding)], depth: usize) -> Result<RetrievalRun> {
        let lists: Vec<(String, Vec<(String, f64)>)> = queries
            .par_iter()
            .map(|(qid, q)| Ok((qid.clone(), top_k(&self.ids, &self.scores(q)?, depth))))
            .collect::<Result<_>>()?;
        let mut run = RetrievalRun::default();
        for (qid, list) in lists {
            run.insert(&qid, list)?;
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdcgResult {
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Queries dropped because their ideal DCG is zero.
    pub excluded: usize,
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    // rank is 1-based
    ((rank + 1) as f64).log2()
}

/// NDCG@k with gain `2^grade − 1` over the queries of `run`. Queries with
/// zero ideal DCG (including ones without judgments) are excluded from the
/// mean and counted; judged queries missing from the run are ignored.
pub fn ndcg_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<NdcgResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for qid in run.query_ids() {
        let mut ideal: Vec<u32> = qrels
            .grades(qid)
            .map(|m| m.values().copied().collect())
            .unwrap_or_default();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / discount(i + 1))
            .sum();
        if idcg <= 0.0 {
            excluded += 1;
            continue;
        }
        let dcg: f64 = run
            .get(qid)
            .unwrap_or(&[])
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (d, _))| gain(qrels.grade(qid, d)) / discount(i + 1))
            .sum();
        per_query.insert(qid.to_string(), dcg / idcg);
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    Ok(NdcgResult {
        k,
        per_query,
        mean,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Pooled,
    ByLanguage,
    ByDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionGroup {
    pub label: String,
    pub queries: usize,
    pub teacher_mean: f64,
    pub student_mean: f64,
    /// Percent; `None` when the teacher mean is zero.
    pub retention: Option<f64>,
}

impl RetentionGroup {
    fn new(label: impl Into<String>, queries: usize, teacher_mean: f64, student_mean: f64) -> Self {
        Self {
            label: label.into(),
            queries,
            teacher_mean,
            student_mean,
            retention: retention_percent(teacher_mean, student_mean),
        }
    }
}

/// `student / teacher × 100`, undefined for a zero teacher mean.
pub fn retention_percent(teacher_mean: f64, student_mean: f64) -> Option<f64> {
    if teacher_mean > 0.0 {
        Some(student_mean / teacher_mean * 100.0)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub grouping: Grouping,
    pub k: usize,
    pub groups: Vec<RetentionGroup>,
    /// Mean over every evaluated query.
    pub pooled: RetentionGroup,
    /// Unweighted mean of the per-group means.
    pub macro_avg: RetentionGroup,
}

impl RetentionReport {
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 5]> = vec![[
            "group".into(),
            "queries".into(),
            "teacher".into(),
            "student".into(),
            "retention".into(),
        ]];
        let fmt_row = |g: &RetentionGroup| {
            [
                g.label.clone(),
                g.queries.to_string(),
                format!("{:.1}", g.teacher_mean * 100.0),
                format!("{:.1}", g.student_mean * 100.0),
                g.retention
                    .map_or_else(|| "undefined".to_string(), |r| format!("{r:.1}%")),
            ]
        };
        rows.extend(self.groups.iter().map(fmt_row));
        rows.push(fmt_row(&self.pooled));
        rows.push(fmt_row(&self.macro_avg));
        format_table(&rows)
    }
}

/// Left-aligns the first column, right-aligns the rest.
pub fn format_table<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (i, (c, w)) in r.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(line, "{c:<w$}");
            } else {
                let _ = write!(line, "  {c:>w$}");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Compares a student run with a teacher run on the same queries, grouped by
/// query metadata. Queries absent from `metadata` fall into group `"unknown"`.
pub fn retention_report(
    teacher: &RetrievalRun,
    student: &RetrievalRun,
    qrels: &Qrels,
    metadata: &HashMap<String, QueryRecord>,
    grouping: Grouping,
    k: usize,
) -> Result<RetentionReport> {
    let t_ids: BTreeSet<&str> = teacher.query_ids().collect();
    let s_ids: BTreeSet<&str> = student.query_ids().collect();
    if t_ids != s_ids {
        let missing = t_ids.symmetric_difference(&s_ids).next().copied().unwrap_or("");
        return Err(Error::InvalidConfig(format!(
            "teacher and student runs cover different queries (e.g. {missing:?})"
        )));
    }
    let t = ndcg_at_k(teacher, qrels, k)?;
    let s = ndcg_at_k(student, qrels, k)?;

    let mut buckets: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for (qid, &tv) in &t.per_query {
        let sv = s.per_query.get(qid).copied().unwrap_or(0.0);
        let label = match grouping {
            Grouping::Pooled => "all".to_string(),
            Grouping::ByLanguage => metadata
                .get(qid)
                .map_or_else(|| "unknown".to_string(), |r| r.language.clone()),
            Grouping::ByDataset => metadata
                .get(qid)
                .map_or_else(|| "unknown".to_string(), |r| r.source.clone()),
        };
        let b = buckets.entry(label).or_default();
        b.0 += 1;
        b.1 += tv;
        b.2 += sv;
    }
    let groups: Vec<RetentionGroup> = buckets
        .into_iter()
        .map(|(label, (n, ts, ss))| RetentionGroup::new(label, n, ts / n as f64, ss / n as f64))
        .collect();
    let total: usize = groups.iter().map(|g| g.queries).sum();
    let pooled = if total == 0 {
        RetentionGroup::new("pooled", 0, 0.0, 0.0)
    } else {
        let ts: f64 = groups.iter().map(|g| g.teacher_mean * g.queries as f64).sum();
        let ss: f64 = groups.iter().map(|g| g.student_mean * g.queries as f64).sum();
        RetentionGroup::new("pooled", total, ts / total as f64, ss / total as f64)
    };
    let macro_avg = if groups.is_empty() {
        RetentionGroup::new("macro", 0, 0.0, 0.0)
    } else {
        let n = groups.len() as f64;
        RetentionGroup::new(
            "macro",
            total,
            groups.iter().map(|g| g.teacher_mean).sum::<f64>() / n,
            groups.iter().map(|g| g.student_mean).sum::<f64>() / n,
        )
    };
    Ok(RetentionReport {
        grouping,
        k,
        groups,
        pooled,
        macro_avg,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
