use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use qdistill::augment::{
    build_merge_plan, dedup, language_counts, merge_translated, preflight, quality_filter, read_record_files,
    read_records, record_violations, stratified_split, write_records, FilterReport, MergePlan,
};
use qdistill::bench::{
    bench_encode, bench_scoring, bytes_to_gb, index_storage_bytes, reports_csv, reports_table, LatencyReport,
    ScoringBenchSpec, ScoringMode, StorageSpec,
};
use qdistill::encoder::FeatureStore;
use qdistill::eval::{format_table, retention_report, Grouping, Qrels, RetentionReport, RetrievalRun, NDCG_CUTOFF};
use qdistill::experiment::{
    build_fixture, data_efficiency_sweep, doc_index, grid_markdown, metadata_index, objective_grid_with,
    student_run, sweep_markdown, sweep_table, teacher_run,
};
use qdistill::io::{read_jsonl, to_jsonl, write_atomic, write_json};
use qdistill::teacher::{estimate_precache_cost, synthetic_translations, CacheKind, CostModel, Dtype};
use qdistill::trainer::{train_with, Caches, Checkpoint};
use qdistill::{LossConfig, StudentEncoder, TeacherCache};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, Scope};
use crate::manifest::Manifest;
use crate::{
    BenchArgs, CacheCommand, CliError, Common, DataArgs, DtypeArg, EvalArgs, KindArg, ObjectiveArg, PrepareArgs,
    ReportArgs, RerunArgs, SweepArgs, SynthArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

fn start(common: &Common, command: &str, scope: Scope) -> Result<(config::Config, Manifest, PathBuf)> {
    let config = config::load(common.config.as_deref(), common.seed, scope)?;
    let mut manifest = Manifest::new(command, &config);
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    fs::create_dir_all(&common.out).map_err(|e| CliError::Usage(format!("{}: {e}", common.out.display())))?;
    Ok((config, manifest, common.out.clone()))
}

pub fn rerun(a: &RerunArgs) -> Result<()> {
    let old = Manifest::read(&a.manifest)?;
    let (args, old_config) = replay_args(&old.args);
    let changed: Vec<String> = old
        .inputs
        .iter()
        .filter(|(path, _)| Some(path.as_str()) != old_config.as_deref())
        .filter_map(|(path, hash)| match qdistill::io::sha256_file(std::path::Path::new(path)) {
            Ok(h) if &h == hash => None,
            Ok(_) => Some(format!("{path}: content changed")),
            Err(e) => Some(format!("{path}: {e}")),
        })
        .collect();
    if !changed.is_empty() {
        return Err(CliError::InputsChanged(changed));
    }

    let mut cfg = tempfile::Builder::new()
        .suffix(".toml")
        .tempfile()
        .map_err(|e| CliError::Usage(format!("temporary config: {e}")))?;
    let text = toml::to_string(&old.config).map_err(|e| CliError::Usage(format!("manifest config: {e}")))?;
    std::io::Write::write_all(&mut cfg, text.as_bytes())
        .map_err(|e| CliError::Usage(format!("temporary config: {e}")))?;

    let mut args = args;
    args.extend([
        "--config".into(),
        cfg.path().display().to_string(),
        "--out".into(),
        a.out.display().to_string(),
    ]);
    crate::replay(args)?;

    let new = Manifest::read(&a.out.join(crate::manifest::MANIFEST_FILE))?;
    if new.config_digest != old.config_digest {
        return Err(CliError::Usage(format!(
            "resolved config digest {} does not match the manifest's {}",
            new.config_digest, old.config_digest
        )));
    }
    let differ: Vec<String> = old
        .artifacts
        .iter()
        .filter(|(name, hash)| !old.host_dependent.contains(name) && new.artifacts.get(*name) != Some(*hash))
        .map(|(name, _)| name.clone())
        .collect();
    if differ.is_empty() {
        Ok(())
    } else {
        Err(CliError::ArtifactsDiffer(differ))
    }
}

/// Recorded arguments without config, output and seed, which the resolved
/// config and the new output directory replace. Also returns the old config path.
fn replay_args(args: &[String]) -> (Vec<String>, Option<String>) {
    let mut kept = Vec::new();
    let mut config = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "-c" | "--config" => config = it.next().cloned(),
            "-o" | "--out" | "--seed" => {
                it.next();
            }
            s if s.starts_with("--config=") => config = Some(s["--config=".len()..].to_string()),
            s if s.starts_with("--out=") || s.starts_with("--seed=") => {}
            _ => kept.push(arg.clone()),
        }
    }
    (kept, config)
}

/// An explicit path, else `name` inside `--data` when it exists there.
fn resolve(explicit: &Option<PathBuf>, data: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| data.as_ref().map(|d| d.join(name)).filter(|p| p.exists()))
}

fn require(path: Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| CliError::Usage(format!("no {what}: pass {flag} or a --data directory containing it")))
}

fn dtype(d: DtypeArg) -> Dtype {
    match d {
        DtypeArg::F16 => Dtype::F16,
        DtypeArg::F32 => Dtype::F32,
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let (config, mut m, out) = start(&a.common, "synth", Scope::Fixture)?;
    let f = build_fixture(&config.fixture)?;
    write_records(&out.join("queries.jsonl"), &f.teacher.queries)?;
    write_records(&out.join("train.jsonl"), &f.train)?;
    write_records(&out.join("val.jsonl"), &f.val)?;
    write_records(&out.join("test.jsonl"), &f.test)?;
    f.teacher.qrels.write(&out.join("qrels.jsonl"))?;
    f.teacher.query_cache.write(&out.join("query_cache.nvtc"))?;
    f.teacher.doc_cache.write(&out.join("doc_cache.nvtc"))?;
    let mut names = vec![
        "queries.jsonl",
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "qrels.jsonl",
        "query_cache.nvtc",
        "doc_cache.nvtc",
    ];
    if !a.translations.is_empty() {
        let q = &f.teacher.query_cache;
        let mut records = Vec::new();
        let mut cache = TeacherCache::new(CacheKind::Query, q.dtype(), q.dim())?;
        for lang in &a.translations {
            let (recs, c) = synthetic_translations(&config.fixture.teacher, &f.train, q, lang)?;
            for r in &recs {
                cache.push(&r.id, &widen(c.raw(&r.id)?))?;
            }
            records.extend(recs);
        }
        write_records(&out.join("translations.jsonl"), &records)?;
        cache.write(&out.join("translation_cache.nvtc"))?;
        names.extend(["translations.jsonl", "translation_cache.nvtc"]);
    }
    for n in names {
        m.artifact(&out, n)?;
    }
    m.write(&out)?;
    println!(
        "synthetic teacher: {} queries ({} train / {} val / {} test), {} documents, dim {}",
        f.teacher.queries.len(),
        f.train.len(),
        f.val.len(),
        f.test.len(),
        f.teacher.doc_cache.len(),
        config.fixture.teacher.dim
    );
    Ok(())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorRecord {
    id: String,
    vector: Vec<f64>,
}

pub fn cache(c: &CacheCommand) -> Result<()> {
    match c {
        CacheCommand::Build {
            common,
            input,
            kind,
            dtype: d,
        } => {
            let (_, mut m, out) = start(common, "cache build", Scope::None)?;
            m.input(input)?;
            let rows: Vec<VectorRecord> = read_jsonl(input)?;
            let first = rows
                .first()
                .ok_or_else(|| CliError::Usage(format!("{}: no vectors", input.display())))?;
            let (kind, name) = match kind {
                KindArg::Query => (CacheKind::Query, "query_cache.nvtc"),
                KindArg::Document => (CacheKind::Document, "doc_cache.nvtc"),
            };
            let cache = TeacherCache::from_records(
                kind,
                dtype(*d),
                first.vector.len(),
                rows.iter().map(|r| (r.id.as_str(), r.vector.as_slice())),
            )?;
            cache.write(&out.join(name))?;
            m.artifact(&out, name)?;
            m.write(&out)?;
            println!("{} vectors of dim {} -> {}", cache.len(), cache.dim(), out.join(name).display());
        }
        CacheCommand::Plan {
            common,
            num_queries,
            num_docs,
            objective,
            dim,
            dtype: d,
        } => {
            let (config, mut m, out) = start(common, "cache plan", Scope::None)?;
            let loss = match objective {
                None => config.run.loss,
                Some(ObjectiveArg::Align) => LossConfig::align(),
                Some(ObjectiveArg::Rank) => LossConfig::rank(),
                Some(ObjectiveArg::Combined) => LossConfig::combined(1.0, 1.0),
                Some(ObjectiveArg::Infonce) => LossConfig::infonce(),
            };
            let model = CostModel { dim: *dim, dtype: dtype(*d) };
            let report = estimate_precache_cost(*num_queries, *num_docs, &loss, model);
            write_json(&out.join("precache_plan.json"), &report)?;
            m.artifact(&out, "precache_plan.json")?;
            m.write(&out)?;
            println!(
                "{}: query cache {:.2} GB{}, total {:.2} GB, loss cost {} per batch",
                report.objective,
                report.query_bytes as f64 / 1e9,
                if report.needs_document_cache {
                    format!(" + document cache {:.2} GB", report.document_bytes as f64 / 1e9)
                } else {
                    " (no document cache needed)".into()
                },
                report.total_gb,
                report.per_step_complexity
            );
        }
        CacheCommand::Inspect { path } => {
            let h = TeacherCache::read_header(path)?;
            println!("{}", serde_json::to_string_pretty(&h).expect("serializable"));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PrepareReport {
    filter: FilterReport,
    duplicates_removed: usize,
    merge_plan: MergePlan,
    added: BTreeMap<String, usize>,
    languages: BTreeMap<String, usize>,
    combined: usize,
    train: usize,
    val: usize,
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let (config, mut m, out) = start(&a.common, "prepare", Scope::Prepare)?;
    for p in a.records.iter().chain(&a.translations).chain(&a.translation_cache) {
        m.input(p)?;
    }
    if let Some(p) = &a.query_cache {
        m.input(p)?;
    }
    let records = read_record_files(&a.records)?;
    let problems = record_violations(&records);
    if !problems.is_empty() {
        return Err(CliError::Records(problems));
    }
    let (filtered, filter) = quality_filter(records);
    let deduped = dedup(filtered);
    log::info!("quality filter kept {}, dedup removed {}", filter.kept, deduped.removed);

    let p = &config.prepare;
    let (combined, plan, added) = if a.translations.is_empty() {
        (deduped.kept, MergePlan { languages: Vec::new() }, BTreeMap::new())
    } else {
        let translated = read_record_files(&a.translations)?;
        let problems = record_violations(&translated);
        if !problems.is_empty() {
            return Err(CliError::Records(problems));
        }
        let langs: Vec<&str> = p.target_languages.iter().map(String::as_str).collect();
        let plan = build_merge_plan(&deduped.kept, &langs, p.target_per_language);
        let merged = merge_translated(&deduped.kept, &translated, &plan, p.merge_seed)?;
        (merged.combined, plan, merged.added)
    };

    let mut names = vec!["train.jsonl", "val.jsonl", "prepare_report.json"];
    if let Some(qc) = &a.query_cache {
        let base = TeacherCache::read(qc)?;
        let extra = a
            .translation_cache
            .iter()
            .map(|p| TeacherCache::read(p))
            .collect::<qdistill::Result<Vec<_>>>()?;
        let mut cache = TeacherCache::new(CacheKind::Query, base.dtype(), base.dim())?;
        for r in &combined {
            let from = std::iter::once(&base)
                .chain(&extra)
                .find(|c| c.contains(&r.id));
            if let Some(c) = from {
                cache.push(&r.id, &widen(c.raw(&r.id)?))?;
            }
        }
        preflight(&combined, &cache)?;
        cache.write(&out.join("query_cache.nvtc"))?;
        names.push("query_cache.nvtc");
    } else if !a.translations.is_empty() {
        log::warn!("no --query-cache given; translated records are not checked for teacher embeddings");
    }

    let split = stratified_split(&combined, p.val_frac, p.split_seed)?;
    write_records(&out.join("train.jsonl"), &split.train)?;
    write_records(&out.join("val.jsonl"), &split.val)?;
    let report = PrepareReport {
        filter,
        duplicates_removed: deduped.removed,
        merge_plan: plan,
        added,
        languages: language_counts(&combined).into_iter().collect(),
        combined: combined.len(),
        train: split.train.len(),
        val: split.val.len(),
    };
    write_json(&out.join("prepare_report.json"), &report)?;
    for n in names {
        m.artifact(&out, n)?;
    }
    m.write(&out)?;
    println!(
        "{} records after filtering ({} duplicates removed), {} combined, {} train / {} val",
        report.filter.kept, report.duplicates_removed, report.combined, report.train, report.val
    );
    Ok(())
}

fn load_features(data: &DataArgs, m: &mut Manifest) -> Result<Option<FeatureStore>> {
    match &data.features {
        Some(p) => {
            m.input(p)?;
            Ok(Some(FeatureStore::read(p)?))
        }
        None => Ok(None),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    config_digest: String,
    train_queries: usize,
    skipped_queries: usize,
    updates: u64,
    micro_steps: u64,
    best_step: u64,
    val_loss: f64,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (config, mut m, out) = start(&a.common, "train", Scope::Run)?;
    let d = &a.data;
    let train_path = require(resolve(&a.train, &d.data, "train.jsonl"), "training records", "--train")?;
    let val_path = require(resolve(&a.val, &d.data, "val.jsonl"), "validation records", "--val")?;
    let qc_path = require(resolve(&d.query_cache, &d.data, "query_cache.nvtc"), "query cache", "--query-cache")?;
    let dc_path = resolve(&d.doc_cache, &d.data, "doc_cache.nvtc");
    for p in [&train_path, &val_path, &qc_path].into_iter().chain(dc_path.as_ref()) {
        m.input(p)?;
    }
    let train_set = read_records(&train_path)?;
    let val_set = read_records(&val_path)?;
    let queries = TeacherCache::read(&qc_path)?;
    let docs = dc_path.as_deref().map(TeacherCache::read).transpose()?;
    let features = load_features(d, &mut m)?;
    let caches = Caches {
        queries: &queries,
        documents: docs.as_ref(),
        features: features.as_ref(),
    };
    let outcome = train_with(&config.run, &train_set, &val_set, &caches, |_| {})
    .map_err(|e| match e {
        qdistill::Error::MissingDocEmbeddings(_) => qdistill::Error::MissingDocEmbeddings(format!(
            "{}; pass --doc-cache or put doc_cache.nvtc in --data",
            config.run.loss.label()
        )),
        other => other,
    })?;

    outcome.checkpoint.write(&out.join("checkpoint.nvck"))?;
    write_atomic(&out.join("metrics.jsonl"), &to_jsonl(&outcome.metrics))?;
    let summary = TrainSummary {
        config_digest: outcome.checkpoint.config_digest.clone(),
        train_queries: outcome.train_queries,
        skipped_queries: outcome.skipped_queries,
        updates: outcome.updates,
        micro_steps: outcome.micro_steps,
        best_step: outcome.checkpoint.step,
        val_loss: outcome.checkpoint.val_loss,
    };
    write_json(&out.join("summary.json"), &summary)?;
    for n in ["checkpoint.nvck", "metrics.jsonl", "summary.json"] {
        m.artifact(&out, n)?;
    }
    m.write(&out)?;
    println!(
        "{} updates on {} queries ({} skipped); best checkpoint at update {} with val loss {:.5}",
        summary.updates, summary.train_queries, summary.skipped_queries, summary.best_step, summary.val_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    k: usize,
    pooled: RetentionReport,
    by_language: RetentionReport,
    by_dataset: RetentionReport,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (_, mut m, out) = start(&a.common, "eval", Scope::None)?;
    let d = &a.data;
    let q_path = require(resolve(&a.queries, &d.data, "test.jsonl"), "queries", "--queries")?;
    let qrels_path = require(resolve(&a.qrels, &d.data, "qrels.jsonl"), "qrels", "--qrels")?;
    m.input(&q_path)?;
    m.input(&qrels_path)?;
    let queries = read_records(&q_path)?;
    let qrels = Qrels::read(&qrels_path)?;

    let needs_index = a.teacher_run.is_none() || a.student_run.is_none();
    let index = if needs_index {
        let p = require(resolve(&d.doc_cache, &d.data, "doc_cache.nvtc"), "document cache", "--doc-cache")?;
        m.input(&p)?;
        Some(doc_index(&TeacherCache::read(&p)?)?)
    } else {
        None
    };
    let teacher = match &a.teacher_run {
        Some(p) => {
            m.input(p)?;
            RetrievalRun::read(p)?
        }
        None => {
            let p = require(resolve(&d.query_cache, &d.data, "query_cache.nvtc"), "query cache", "--query-cache")?;
            m.input(&p)?;
            teacher_run(&queries, &TeacherCache::read(&p)?, index.as_ref().expect("index built"))?
        }
    };
    let student = match (&a.student_run, &a.checkpoint) {
        (Some(p), _) => {
            m.input(p)?;
            RetrievalRun::read(p)?
        }
        (None, Some(p)) => {
            m.input(p)?;
            let encoder = Checkpoint::read(p)?.into_encoder();
            let features = load_features(d, &mut m)?;
            student_run(&encoder, &queries, features.as_ref(), index.as_ref().expect("index built"))?
        }
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --student-run".into())),
    };

    let meta = metadata_index(&queries);
    let report = |g| retention_report(&teacher, &student, &qrels, &meta, g, NDCG_CUTOFF);
    let output = EvalOutput {
        k: NDCG_CUTOFF,
        pooled: report(Grouping::Pooled)?,
        by_language: report(Grouping::ByLanguage)?,
        by_dataset: report(Grouping::ByDataset)?,
    };
    teacher.write(&out.join("teacher_run.jsonl"))?;
    student.write(&out.join("student_run.jsonl"))?;
    write_json(&out.join("retention.json"), &output)?;
    let md = format!(
        "## Pooled\n\n```\n{}```\n\n## By language\n\n```\n{}```\n\n## By dataset\n\n```\n{}```\n",
        output.pooled.to_table(),
        output.by_language.to_table(),
        output.by_dataset.to_table()
    );
    write_atomic(&out.join("retention.md"), md.as_bytes())?;
    for n in ["teacher_run.jsonl", "student_run.jsonl", "retention.json", "retention.md"] {
        m.artifact(&out, n)?;
    }
    m.write(&out)?;
    print!("{}", output.pooled.to_table());
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let mut config = config::load(a.common.config.as_deref(), a.common.seed, Scope::FixtureRun)?;
    if !a.fractions.is_empty() {
        config.sweep_fractions = a.fractions.iter().map(|p| p / 100.0).collect();
        let v = config.violations(Scope::FixtureRun);
        if !v.is_empty() {
            return Err(CliError::Config(v));
        }
    }
    let mut m = Manifest::new("sweep", &config);
    if let Some(p) = &a.common.config {
        m.input(p)?;
    }
    let out = a.common.out.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;

    let fixture = build_fixture(&config.fixture)?;
    let rows = data_efficiency_sweep(&config.run, &config.sweep_fractions, &fixture)?;
    write_atomic(&out.join("sweep.md"), sweep_markdown(&rows).as_bytes())?;
    write_json(&out.join("sweep.json"), &rows)?;
    for n in ["sweep.md", "sweep.json"] {
        m.artifact(&out, n)?;
    }
    m.write(&out)?;
    print!("{}", sweep_table(&rows));
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let (config, mut m, out) = start(&a.common, "report", Scope::FixtureRun)?;
    let fixture = build_fixture(&config.fixture)?;
    let recipe = config.recipe();
    let rows = objective_grid_with(&config.run, &fixture, &recipe.grid_cells())?;
    let md = grid_markdown(&rows);
    write_atomic(&out.join("grid.md"), md.as_bytes())?;
    write_json(&out.join("grid.json"), &rows)?;
    for n in ["grid.md", "grid.json"] {
        m.artifact(&out, n)?;
    }
    m.write(&out)?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct StorageRow {
    spec: StorageSpec,
    bytes: u64,
    gb: f64,
}

#[derive(Serialize)]
struct BenchOutput {
    environment: String,
    latency: Vec<LatencyReport>,
    storage: Vec<StorageRow>,
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let (config, mut m, out) = start(&a.common, "bench", Scope::Bench)?;
    let b = &config.bench;
    let encoder = match &a.checkpoint {
        Some(p) => {
            m.input(p)?;
            Checkpoint::read(p)?.into_encoder()
        }
        None => StudentEncoder::new(config.run.encoder.clone(), &mut ChaCha8Rng::seed_from_u64(b.seed))?,
    };
    let cfg = b.bench_config();
    let mut latency = vec![bench_encode(&encoder, &b.sample_queries, &cfg)?];
    let base = ScoringBenchSpec {
        top_k: b.top_k,
        seed: b.seed,
        ..Default::default()
    };
    for &n in &b.cosine_docs {
        let spec = ScoringBenchSpec {
            num_docs: n,
            dim: b.cosine_dim,
            ..base
        };
        let r = bench_scoring(ScoringMode::Cosine, &spec, &cfg)?;
        latency.extend([r.scoring, r.top_k]);
    }
    let spec = ScoringBenchSpec {
        num_docs: b.maxsim_docs,
        dim: b.maxsim_dim,
        tokens_per_doc: b.tokens_per_doc,
        query_tokens: b.query_tokens,
        ..base
    };
    let r = bench_scoring(ScoringMode::MaxSim, &spec, &cfg)?;
    latency.extend([r.scoring, r.top_k]);

    let storage = b
        .storage
        .iter()
        .map(|s| {
            let bytes = index_storage_bytes(s)?;
            Ok(StorageRow {
                spec: *s,
                bytes,
                gb: bytes_to_gb(bytes),
            })
        })
        .collect::<qdistill::Result<Vec<_>>>()?;
    let mut rows = vec![["index".to_string(), "bytes".into(), "GB".into()]];
    for s in &storage {
        rows.push([
            format!(
                "{} docs x {} tok x {}-d x {} B",
                s.spec.num_docs, s.spec.tokens_per_doc, s.spec.dim, s.spec.dtype_bytes
            ),
            s.bytes.to_string(),
            format!("{:.1}", s.gb),
        ]);
    }
    let md = format!(
        "{}\n\n```\n{}```\n\n```\n{}```\n",
        qdistill::bench::environment(),
        reports_table(&latency),
        format_table(&rows)
    );
    let output = BenchOutput {
        environment: qdistill::bench::environment(),
        latency,
        storage,
    };
    write_json(&out.join("bench.json"), &output)?;
    write_atomic(&out.join("bench.md"), md.as_bytes())?;
    let mut names = vec!["bench.json", "bench.md"];
    if a.csv {
        write_atomic(&out.join("bench.csv"), reports_csv(&output.latency).as_bytes())?;
        names.push("bench.csv");
    }
    for n in names {
        m.artifact(&out, n)?;
        m.host_dependent.push(n.to_string());
    }
    m.write(&out)?;
    print!("{md}");
    Ok(())
}
