//! End-to-end runs on the synthetic teacher: train, evaluate against the
//! teacher, sweep data fractions and compare objectives.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::augment::{stratified_split, QueryRecord};
use crate::embedding::Embedding;
use crate::encoder::{FeatureStore, StudentEncoder};
use crate::error::{Error, Result};
use crate::eval::{format_table, ndcg_at_k, retention_percent, DocIndex, Qrels, RetrievalRun, NDCG_CUTOFF};
use crate::losses::{LossConfig, Objective};
use crate::teacher::{generate_synthetic_teacher, SyntheticTeacher, SyntheticTeacherSpec, TeacherCache};
use crate::trainer::{train, Caches, RunConfig, TrainOutcome};

/// Ranked-list depth kept for every query.
pub const RUN_DEPTH: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub teacher: SyntheticTeacherSpec,
    /// The last `held_out` generated queries form the test set.
    pub held_out: usize,
    pub val_frac: f64,
    pub split_seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            teacher: SyntheticTeacherSpec {
                num_queries: 2048 + 256,
                ..Default::default()
            },
            held_out: 256,
            val_frac: 0.02,
            split_seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub teacher: SyntheticTeacher,
    pub train: Vec<QueryRecord>,
    pub val: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
}

impl Fixture {
    pub fn caches(&self) -> Caches<'_> {
        Caches {
            queries: &self.teacher.query_cache,
            documents: Some(&self.teacher.doc_cache),
            features: None,
        }
    }
}

pub fn build_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.held_out >= spec.teacher.num_queries {
        return Err(Error::InvalidConfig(format!(
            "held_out ({}) must be smaller than num_queries ({})",
            spec.held_out, spec.teacher.num_queries
        )));
    }
    let teacher = generate_synthetic_teacher(&spec.teacher)?;
    let cut = teacher.queries.len() - spec.held_out;
    let test = teacher.queries[cut..].to_vec();
    let split = stratified_split(&teacher.queries[..cut], spec.val_frac, spec.split_seed)?;
    Ok(Fixture {
        train: split.train,
        val: split.val,
        test,
        teacher,
    })
}

pub fn doc_index(cache: &TeacherCache) -> Result<DocIndex> {
    DocIndex::new(cache.embeddings()?)
}

/// Ranks documents with the teacher's own query embeddings.
pub fn teacher_run(queries: &[QueryRecord], query_cache: &TeacherCache, index: &DocIndex) -> Result<RetrievalRun> {
    let embs = queries
        .iter()
        .map(|q| Ok((q.id.clone(), query_cache.embedding(&q.id)?)))
        .collect::<Result<Vec<(String, Embedding)>>>()?;
    index.retrieve(&embs, RUN_DEPTH)
}

/// Ranks documents with student query embeddings. Queries the student cannot
/// encode (no tokens) get an empty ranking.
pub fn student_run(
    encoder: &StudentEncoder,
    queries: &[QueryRecord],
    features: Option<&FeatureStore>,
    index: &DocIndex,
) -> Result<RetrievalRun> {
    let mut embs = Vec::with_capacity(queries.len());
    let mut empty = Vec::new();
    for q in queries {
        match encoder.input_for(&q.id, &q.text, features) {
            Ok(input) => embs.push((q.id.clone(), encoder.encode(&input)?)),
            Err(Error::EmptyQuery(_)) => empty.push(q.id.clone()),
            Err(e) => return Err(e),
        }
    }
    let mut run = index.retrieve(&embs, RUN_DEPTH)?;
    for id in empty {
        run.insert(&id, Vec::new())?;
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub queries: usize,
    pub excluded: usize,
    pub teacher_ndcg: f64,
    pub student_ndcg: f64,
    /// Percent; `None` when the teacher scores zero.
    pub retention: Option<f64>,
}

pub fn evaluate(
    encoder: &StudentEncoder,
    queries: &[QueryRecord],
    caches: &Caches<'_>,
    index: &DocIndex,
    qrels: &Qrels,
) -> Result<EvalSummary> {
    let t = ndcg_at_k(&teacher_run(queries, caches.queries, index)?, qrels, NDCG_CUTOFF)?;
    let s = ndcg_at_k(&student_run(encoder, queries, caches.features, index)?, qrels, NDCG_CUTOFF)?;
    Ok(EvalSummary {
        queries: t.per_query.len(),
        excluded: t.excluded,
        teacher_ndcg: t.mean,
        student_ndcg: s.mean,
        retention: retention_percent(t.mean, s.mean),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub label: String,
    pub config_digest: String,
    pub train_queries: usize,
    pub updates: u64,
    pub best_step: u64,
    pub val_loss: f64,
    pub eval: EvalSummary,
}

/// Trains on the fixture and evaluates the selected checkpoint on its test split.
pub fn run_experiment(label: &str, config: &RunConfig, fixture: &Fixture) -> Result<(ExperimentResult, TrainOutcome)> {
    let caches = fixture.caches();
    let outcome = train(config, &fixture.train, &fixture.val, &caches)?;
    let encoder = outcome.checkpoint.to_encoder();
    let index = doc_index(&fixture.teacher.doc_cache)?;
    let eval = evaluate(&encoder, &fixture.test, &caches, &index, &fixture.teacher.qrels)?;
    let result = ExperimentResult {
        label: label.to_string(),
        config_digest: outcome.checkpoint.config_digest.clone(),
        train_queries: outcome.train_queries,
        updates: outcome.updates,
        best_step: outcome.checkpoint.step,
        val_loss: outcome.checkpoint.val_loss,
        eval,
    };
    Ok((result, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<ExperimentResult>,
    /// Set when this cell failed; other cells still run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains one model per data fraction with otherwise identical settings.
/// Rows come back in ascending fraction order.
pub fn data_efficiency_sweep(base: &RunConfig, fractions: &[f64], fixture: &Fixture) -> Result<Vec<SweepRow>> {
    let n = fixture.train.len();
    let mut sorted = fractions.to_vec();
    for &f in &sorted {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidConfig(format!("fraction must be in (0, 1], got {f}")));
        }
        if (f * n as f64).floor() as usize == 0 {
            return Err(Error::EmptySubset { fraction: f, available: n });
        }
    }
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for f in sorted {
        let config = RunConfig {
            subset_fraction: f,
            ..base.clone()
        };
        let train_pairs = (f * n as f64).floor() as usize;
        let label = fraction_label(f);
        log::info!("sweep cell {label}: {train_pairs} pairs");
        match run_experiment(&label, &config, fixture) {
            Ok((r, _)) => rows.push(SweepRow {
                fraction: f,
                train_pairs,
                result: Some(r),
                error: None,
            }),
            Err(e @ Error::DivergedRun { .. }) => {
                log::warn!("sweep cell {label} diverged: {e}");
                rows.push(SweepRow {
                    fraction: f,
                    train_pairs,
                    result: None,
                    error: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

pub fn fraction_label(f: f64) -> String {
    let pct = f * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}%", pct.round() as i64)
    } else {
        format!("{pct}%")
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn retention_cell(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".into(), |r| format!("{r:.1}%"))
}

fn markdown(rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        out.push_str("| ");
        out.push_str(&r.join(" | "));
        out.push_str(" |\n");
        if i == 0 {
            out.push('|');
            for _ in r {
                out.push_str("---|");
            }
            out.push('\n');
        }
    }
    out
}

pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut t = vec![vec![
        "Data".to_string(),
        "Pairs".into(),
        "Teacher NDCG@5".into(),
        "Student NDCG@5".into(),
        "Retention".into(),
    ]];
    for r in rows {
        let mut cells = vec![fraction_label(r.fraction), r.train_pairs.to_string()];
        match (&r.result, &r.error) {
            (Some(res), _) => cells.extend([
                pct(res.eval.teacher_ndcg),
                pct(res.eval.student_ndcg),
                retention_cell(res.eval.retention),
            ]),
            (None, e) => cells.extend([
                "-".into(),
                "-".into(),
                format!("failed: {}", e.as_deref().unwrap_or("unknown")),
            ]),
        }
        t.push(cells);
    }
    markdown(&t)
}

/// Plain aligned-column rendering of a sweep.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut t: Vec<[String; 4]> = vec![["data".into(), "pairs".into(), "student".into(), "retention".into()]];
    for r in rows {
        let (s, ret) = match &r.result {
            Some(res) => (pct(res.eval.student_ndcg), retention_cell(res.eval.retention)),
            None => ("-".into(), "failed".into()),
        };
        t.push([fraction_label(r.fraction), r.train_pairs.to_string(), s, ret]);
    }
    format_table(&t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub loss: LossConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<ExperimentResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains the six-objective loss ablation with otherwise identical settings.
pub fn objective_grid(base: &RunConfig, fixture: &Fixture) -> Result<Vec<GridRow>> {
    objective_grid_with(base, fixture, &LossConfig::ablation_grid())
}

pub fn objective_grid_with(base: &RunConfig, fixture: &Fixture, grid: &[(&str, LossConfig)]) -> Result<Vec<GridRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for (label, loss) in grid {
        let config = RunConfig {
            loss: *loss,
            ..base.clone()
        };
        log::info!("grid cell {label}");
        let (result, error) = match run_experiment(label, &config, fixture) {
            Ok((r, _)) => (Some(r), None),
            Err(e @ Error::DivergedRun { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        rows.push(GridRow {
            label: label.to_string(),
            loss: *loss,
            result,
            error,
        });
    }
    Ok(rows)
}

fn retention_of(rows: &[GridRow], pred: impl Fn(&LossConfig) -> bool) -> Option<f64> {
    rows.iter()
        .find(|r| pred(&r.loss))
        .and_then(|r| r.result.as_ref())
        .and_then(|r| r.eval.retention)
}

pub fn pure_align_retention(rows: &[GridRow]) -> Option<f64> {
    retention_of(rows, |l| l.objective == Objective::Align)
}

pub fn pure_rank_retention(rows: &[GridRow]) -> Option<f64> {
    retention_of(rows, |l| l.objective == Objective::Rank)
}

pub fn infonce_retention(rows: &[GridRow]) -> Option<f64> {
    retention_of(rows, |l| l.objective == Objective::InfoNce)
}

/// One-line summary of where pure alignment, pure ranking and InfoNCE fall.
pub fn ordering_summary(rows: &[GridRow]) -> String {
    match (pure_align_retention(rows), pure_rank_retention(rows), infonce_retention(rows)) {
        (Some(a), Some(r), Some(i)) => {
            let holds = a > r && r > i;
            format!(
                "align {a:.1}% / rank {r:.1}% / InfoNCE {i:.1}%: align > rank > InfoNCE {}",
                if holds { "holds" } else { "does not hold" }
            )
        }
        _ => "ordering unavailable (missing cells)".into(),
    }
}

/// Markdown grid with one row per objective: weights, NDCG@5 ×100 of
/// student and teacher on the test split, and retention.
pub fn grid_markdown(rows: &[GridRow]) -> String {
    let mut t = vec![vec![
        "λ_a".to_string(),
        "λ_r".into(),
        "Student NDCG@5".into(),
        "Teacher NDCG@5".into(),
        "Retention".into(),
    ]];
    for r in rows {
        let mut cells = if r.loss.objective == Objective::InfoNce {
            vec!["InfoNCE".to_string(), String::new()]
        } else {
            vec![format!("{}", r.loss.lambda_align), format!("{}", r.loss.lambda_rank)]
        };
        match &r.result {
            Some(res) => cells.extend([
                pct(res.eval.student_ndcg),
                pct(res.eval.teacher_ndcg),
                retention_cell(res.eval.retention),
            ]),
            None => cells.extend([
                "-".into(),
                "-".into(),
                format!("failed: {}", r.error.as_deref().unwrap_or("unknown")),
            ]),
        }
        t.push(cells);
    }
    let mut out = markdown(&t);
    out.push('\n');
    out.push_str(&ordering_summary(rows));
    out.push('\n');
    out
}

/// Query metadata keyed by id, as consumed by retention reports.
pub fn metadata_index(records: &[QueryRecord]) -> HashMap<String, QueryRecord> {
    records.iter().map(|r| (r.id.clone(), r.clone())).collect()
}

/// Fractions of the training set in the data-efficiency sweep.
pub const DEFAULT_SWEEP_FRACTIONS: [f64; 6] = [0.01, 0.05, 0.10, 0.25, 0.50, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub label: String,
    pub loss: LossConfig,
}

/// Everything needed to reproduce the synthetic experiments: fixture, base
/// run, sweep fractions and the objective grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub fixture: FixtureSpec,
    pub run: RunConfig,
    pub sweep_fractions: Vec<f64>,
    pub grid: Vec<GridCell>,
}

impl Default for Recipe {
    fn default() -> Self {
        let fixture = FixtureSpec::default();
        let mut run = RunConfig::default();
        run.encoder.output_dim = fixture.teacher.dim;
        Self {
            fixture,
            run,
            sweep_fractions: DEFAULT_SWEEP_FRACTIONS.to_vec(),
            grid: LossConfig::ablation_grid()
                .into_iter()
                .map(|(label, loss)| GridCell {
                    label: label.into(),
                    loss,
                })
                .collect(),
        }
    }
}

impl Recipe {
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.run.violations().into_iter().map(|s| format!("run: {s}")).collect();
        v.extend(
            self.fixture
                .teacher
                .violations()
                .into_iter()
                .map(|s| format!("fixture.teacher: {s}")),
        );
        if self.fixture.held_out >= self.fixture.teacher.num_queries {
            v.push(format!(
                "fixture: held_out ({}) must be smaller than num_queries ({})",
                self.fixture.held_out, self.fixture.teacher.num_queries
            ));
        }
        if !(self.fixture.val_frac > 0.0 && self.fixture.val_frac < 1.0) {
            v.push(format!("fixture: val_frac must be in (0, 1), got {}", self.fixture.val_frac));
        }
        if self.run.encoder.output_dim != self.fixture.teacher.dim {
            v.push(format!(
                "run.encoder.output_dim ({}) must equal fixture.teacher.dim ({})",
                self.run.encoder.output_dim, self.fixture.teacher.dim
            ));
        }
        for f in &self.sweep_fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                v.push(format!("sweep_fractions: {f} is outside (0, 1]"));
            }
        }
        for c in &self.grid {
            v.extend(c.loss.violations().into_iter().map(|s| format!("grid {}: {s}", c.label)));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }

    pub fn grid_cells(&self) -> Vec<(&str, LossConfig)> {
        self.grid.iter().map(|c| (c.label.as_str(), c.loss)).collect()
    }
}
