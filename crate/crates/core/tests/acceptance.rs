//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so that every criterion is reported even when an earlier one fails.

mod common;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{gradient_check, oracle_equivalence, record, unit_rows};
use qdistill::augment::{
    build_merge_plan, merge_translated, stratified_split, MergePlan, QueryRecord, DEFAULT_TARGET_LANGUAGES,
};
use qdistill::bench::{bytes_to_gb, index_storage_bytes, StorageSpec};
use qdistill::encoder::InputMode;
use qdistill::eval::{retention_report, Grouping, Qrels, RetrievalRun, NDCG_CUTOFF};
use qdistill::experiment::{
    build_fixture, data_efficiency_sweep, fraction_label, grid_markdown, infonce_retention, objective_grid_with,
    pure_align_retention, run_experiment, sweep_markdown, Fixture, Recipe,
};
use qdistill::losses::{align_loss, batch_align_loss, combined_loss, infonce_loss, rank_loss, BatchInputs, LossConfig};
use qdistill::teacher::{estimate_precache_cost, generate_synthetic_teacher, CostModel};
use qdistill::trainer::{train, RunConfig};
use qdistill::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn recipe_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes/paper_grid.toml")
}

fn load_recipe() -> Recipe {
    let text = std::fs::read_to_string(recipe_path()).expect("shipped recipe");
    let recipe: Recipe = toml::from_str(&text).expect("recipe parses");
    recipe.validate().expect("recipe is valid");
    recipe
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for cfg in [
        LossConfig::align(),
        LossConfig::rank(),
        LossConfig::infonce(),
        LossConfig::combined(1.0, 0.5),
    ] {
        for (input, seed) in [(InputMode::EmbeddingBag, 11), (InputMode::ExternalFeatures, 12)] {
            let r = gradient_check(&cfg, input, seed, 120);
            coords += r.checked;
            check(r.checked >= 100, "too few coordinates")?;
            check(
                r.max_rel_err < 1e-4,
                format!("{}: rel err {:e} at {}", cfg.label(), r.max_rel_err, r.worst),
            )?;
            worst = worst.max(r.max_rel_err);
        }
    }
    let t = start.elapsed();
    check(t < Duration::from_secs(60), format!("took {t:?}"))?;
    Ok(format!("{coords} coordinates over 4 objectives, max rel err {worst:.1e}, {t:.1?}"))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let n = oracle_equivalence(7, 50)?;
    let t = start.elapsed();
    check(t < Duration::from_secs(60), format!("took {t:?}"))?;
    Ok(format!("50 instances, {n} queries: rankings exact, scores within 1e-6, {t:.1?}"))
}

fn analytic_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = unit_rows(&mut rng, 1, 16);
    let v = v.row(0);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let identity = align_loss(v, v).map_err(|e| e.to_string())?.0;
    let anti = align_loss(v, &neg).map_err(|e| e.to_string())?.0;
    check(identity.abs() <= 1e-12, format!("align identity {identity:e}"))?;
    check((anti - 2.0).abs() <= 1e-12, format!("align antiparallel {anti}"))?;

    let b = 8;
    let q_s = unit_rows(&mut rng, b, 16);
    let q_t = unit_rows(&mut rng, b, 16);
    let same = unit_rows(&mut rng, 1, 16);
    let flat = Matrix::from_rows(&vec![same.row(0).to_vec(); b]).map_err(|e| e.to_string())?;
    let kl = rank_loss(&q_s, &q_t, &flat, 0.07, 0.05).map_err(|e| e.to_string())?.0;
    check(kl.abs() <= 1e-12, format!("uniform rank-KL {kl:e}"))?;
    let positives: Vec<usize> = (0..b).collect();
    let nce = infonce_loss(&q_s, &flat, &positives, 0.05).map_err(|e| e.to_string())?.0;
    check((nce - (b as f64).ln()).abs() <= 1e-9, format!("uniform InfoNCE {nce} vs ln {b}"))?;

    let docs = unit_rows(&mut rng, b, 16);
    let combined = combined_loss(
        &LossConfig::combined(1.0, 0.5),
        BatchInputs {
            student: &q_s,
            teacher: &q_t,
            docs: Some(&docs),
        },
    )
    .map_err(|e| e.to_string())?
    .loss;
    let a = batch_align_loss(&q_s, &q_t).map_err(|e| e.to_string())?.0;
    let r = rank_loss(&q_s, &q_t, &docs, 0.07, 0.05).map_err(|e| e.to_string())?.0;
    let gap = (combined - (a + 0.5 * r)).abs();
    check(gap <= 1e-12, format!("combined linearity gap {gap:e}"))?;
    Ok(format!(
        "align 0/2, rank-KL {kl:.0e}, InfoNCE-ln B {:.0e}, linearity gap {gap:.0e}",
        (nce - (b as f64).ln()).abs()
    ))
}

fn storage() -> Outcome {
    let cases = [
        (StorageSpec::single_vector_f32(1_000_000, 2048), 8_192_000_000u64, "8.2"),
        (StorageSpec::multi_vector_f16(1_000_000, 128, 1000), 256_000_000_000, "256.0"),
        (StorageSpec::multi_vector_f16(1_000_000, 320, 1280), 819_200_000_000, "819.2"),
    ];
    let mut shown = Vec::new();
    for (spec, bytes, printed) in cases {
        let got = index_storage_bytes(&spec).map_err(|e| e.to_string())?;
        check(got == bytes, format!("{spec:?}: {got} != {bytes}"))?;
        let gb = format!("{:.1}", bytes_to_gb(got));
        check(gb == printed, format!("{gb} GB != {printed} GB"))?;
        shown.push(format!("{gb} GB"));
    }
    Ok(shown.join(", "))
}

fn cost_model() -> Outcome {
    let n = 711_603;
    let align = estimate_precache_cost(n, n, &LossConfig::align(), CostModel::default());
    let rank = estimate_precache_cost(n, n, &LossConfig::combined(1.0, 0.5), CostModel::default());
    check(align.needs_query_cache && !align.needs_document_cache, "align plan must need only queries")?;
    check(rank.needs_document_cache, "ranking plan must need documents")?;
    check((align.total_gb - 2.9).abs() / 2.9 <= 0.02, format!("align {:.3} GB", align.total_gb))?;
    check((rank.total_gb - 5.8).abs() / 5.8 <= 0.02, format!("with documents {:.3} GB", rank.total_gb))?;
    Ok(format!(
        "query-only {:.2} GB vs with documents {:.2} GB",
        align.total_gb, rank.total_gb
    ))
}

/// Binary-relevance runs over 1000 queries in which the teacher finds the
/// relevant document at rank 1 for 843 queries and the student for 822.
fn retention_arithmetic() -> Outcome {
    let mut qrels = Qrels::default();
    let (mut teacher, mut student) = (RetrievalRun::default(), RetrievalRun::default());
    for i in 0..1000 {
        let q = format!("q{i:04}");
        let rel = format!("rel{i:04}");
        qrels.insert(&q, &rel, 1);
        let hit = vec![(rel.clone(), 1.0), ("other".to_string(), 0.5)];
        let miss = vec![("other".to_string(), 1.0)];
        teacher
            .insert(&q, if i < 843 { hit.clone() } else { miss.clone() })
            .map_err(|e| e.to_string())?;
        student
            .insert(&q, if i < 822 { hit } else { miss })
            .map_err(|e| e.to_string())?;
    }
    let report = retention_report(&teacher, &student, &qrels, &HashMap::new(), Grouping::Pooled, NDCG_CUTOFF)
        .map_err(|e| e.to_string())?;
    let p = &report.pooled;
    let (t, s) = (format!("{:.1}", p.teacher_mean * 100.0), format!("{:.1}", p.student_mean * 100.0));
    let r = p.retention.ok_or("undefined retention")?;
    check(t == "84.3" && s == "82.2", format!("means {t} / {s}"))?;
    check(format!("{r:.1}") == "97.5", format!("retention {r:.3}%"))?;
    Ok(format!("teacher {t}, student {s}, retention {r:.1}%"))
}

fn end_to_end(recipe: &Recipe, fixture: &Fixture) -> Outcome {
    let start = Instant::now();
    let (res, _) = run_experiment("align", &recipe.run, fixture).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let ret = res.eval.retention.ok_or("undefined retention")?;
    let detail = format!(
        "retention {ret:.1}% (student {:.3} / teacher {:.3} NDCG@5 on {} held-out queries), {} updates, {t:.1?}",
        res.eval.student_ndcg, res.eval.teacher_ndcg, res.eval.queries, res.updates
    );
    check(res.updates <= 2000, format!("{} updates exceeds 2000", res.updates))?;
    check(t < Duration::from_secs(600), format!("took {t:?}"))?;
    check(ret >= 90.0, detail.clone())?;
    Ok(detail)
}

fn objective_ordering(recipe: &Recipe, fixture: &Fixture) -> Outcome {
    let rows = objective_grid_with(&recipe.run, fixture, &recipe.grid_cells()).map_err(|e| e.to_string())?;
    println!("{}", grid_markdown(&rows));
    check(rows.len() == 6, format!("{} grid rows", rows.len()))?;
    if let Some(r) = rows.iter().find(|r| r.result.is_none()) {
        return Err(format!("{} failed: {}", r.label, r.error.as_deref().unwrap_or("")));
    }
    let a = pure_align_retention(&rows).ok_or("no align cell")?;
    let i = infonce_retention(&rows).ok_or("no InfoNCE cell")?;
    let detail = format!("align {a:.1}% vs InfoNCE {i:.1}%");
    check(a >= i, format!("{detail}: align below InfoNCE"))?;
    Ok(detail)
}

fn determinism(recipe: &Recipe) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bytes = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());

    let mut caches = Vec::new();
    for run in 0..2 {
        let t = generate_synthetic_teacher(&recipe.fixture.teacher).map_err(|e| e.to_string())?;
        let (q, d) = (dir.path().join(format!("q{run}.nvtc")), dir.path().join(format!("d{run}.nvtc")));
        t.query_cache.write(&q).map_err(|e| e.to_string())?;
        t.doc_cache.write(&d).map_err(|e| e.to_string())?;
        caches.push((bytes(&q)?, bytes(&d)?));
    }
    check(caches[0] == caches[1], "teacher caches differ")?;

    let f1 = build_fixture(&recipe.fixture).map_err(|e| e.to_string())?;
    let f2 = build_fixture(&recipe.fixture).map_err(|e| e.to_string())?;
    check(f1.train == f2.train && f1.val == f2.val, "splits differ")?;
    let s1 = stratified_split(&f1.teacher.queries, 0.02, 9).map_err(|e| e.to_string())?;
    let s2 = stratified_split(&f2.teacher.queries, 0.02, 9).map_err(|e| e.to_string())?;
    check(s1 == s2, "stratified splits differ")?;

    let base = miniature_base();
    let pool = miniature_pool();
    let plan = build_merge_plan(&base, &DEFAULT_TARGET_LANGUAGES, 200);
    let m1 = merge_translated(&base, &pool, &plan, 42).map_err(|e| e.to_string())?;
    let m2 = merge_translated(&base, &pool, &plan, 42).map_err(|e| e.to_string())?;
    check(m1 == m2, "merges differ")?;

    let cfg = RunConfig {
        epochs: 3,
        ..recipe.run.clone()
    };
    let mut ckpts = Vec::new();
    for run in 0..2 {
        let out = train(&cfg, &f1.train, &f1.val, &f1.caches()).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("c{run}.ckpt"));
        out.checkpoint.write(&p).map_err(|e| e.to_string())?;
        ckpts.push(bytes(&p)?);
    }
    check(ckpts[0] == ckpts[1], "checkpoints differ")?;
    Ok(format!(
        "caches ({} + {} B), splits, merges ({} records) and checkpoints ({} B) bitwise identical",
        caches[0].0.len(),
        caches[0].1.len(),
        m1.combined.len(),
        ckpts[0].len()
    ))
}

/// Translation table at 1/1000 scale, existing counts rounded.
fn miniature_base() -> Vec<QueryRecord> {
    let mut out = Vec::new();
    for (lang, n) in [("es", 57), ("de", 57), ("fr", 54), ("it", 54), ("en", 490)] {
        for i in 0..n {
            out.push(record(&format!("{lang}{i}"), &format!("{lang} query {i}"), lang, "vdr"));
        }
    }
    out
}

fn miniature_pool() -> Vec<QueryRecord> {
    DEFAULT_TARGET_LANGUAGES
        .iter()
        .flat_map(|l| (0..250).map(move |i| record(&format!("{l}:t{i}"), &format!("{l} translation {i}"), l, "vdr")))
        .collect()
}

fn augmentation() -> Outcome {
    let base = miniature_base();
    check(base.len() == 712, "base size")?;
    let plan = build_merge_plan(&base, &DEFAULT_TARGET_LANGUAGES, 200);
    let gap = |l: &str| plan.languages.iter().find(|p| p.language == l).map(|p| p.to_add);
    for (l, want) in [("it", 146), ("fr", 146), ("de", 143), ("es", 143), ("pt", 200)] {
        check(gap(l) == Some(want), format!("{l} gap {:?} != {want}", gap(l)))?;
    }
    let merged = merge_translated(&base, &miniature_pool(), &plan, 42).map_err(|e| e.to_string())?;
    check(
        merged.combined.len() == base.len() + plan.total_to_add(),
        format!("{} != {} + {}", merged.combined.len(), base.len(), plan.total_to_add()),
    )?;

    let counts: HashMap<String, usize> = [("pt", 0), ("it", 53_787), ("fr", 54_079), ("de", 56_994), ("es", 57_491)]
        .into_iter()
        .map(|(l, n)| (l.to_string(), n))
        .collect();
    let full = MergePlan::from_counts(&counts, &DEFAULT_TARGET_LANGUAGES, 200_000);
    let it = full.languages.iter().find(|p| p.language == "it").map(|p| p.to_add);
    check(it == Some(146_213), format!("full-size Italian gap {it:?}"))?;
    check(full.total_to_add() == 777_649, format!("full-size total {}", full.total_to_add()))?;
    check(full.combined_count(711_603) == 1_489_252, "combined count")?;
    Ok(format!(
        "miniature 712 + {} = {}; full size 711603 + {} = {}",
        plan.total_to_add(),
        merged.combined.len(),
        full.total_to_add(),
        full.combined_count(711_603)
    ))
}

fn sweep(recipe: &Recipe, fixture: &Fixture) -> Outcome {
    let rows = data_efficiency_sweep(&recipe.run, &recipe.sweep_fractions, fixture).map_err(|e| e.to_string())?;
    println!("{}", sweep_markdown(&rows));
    check(rows.len() == 6, format!("{} rows", rows.len()))?;
    check(
        rows.windows(2).all(|w| w[0].fraction < w[1].fraction),
        "labels are not increasing",
    )?;
    let ret = |f: f64| {
        rows.iter()
            .find(|r| r.fraction == f)
            .and_then(|r| r.result.as_ref())
            .and_then(|r| r.eval.retention)
    };
    let (full, quarter) = (ret(1.0).ok_or("100% cell failed")?, ret(0.25).ok_or("25% cell failed")?);
    let labels: Vec<String> = rows.iter().map(|r| fraction_label(r.fraction)).collect();
    let detail = format!("{}: 100% {full:.1}% vs 25% {quarter:.1}%", labels.join("/"));
    check(full >= quarter - 2.0, detail.clone())?;
    Ok(detail)
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let recipe = load_recipe();
    let fixture = build_fixture(&recipe.fixture).expect("fixture");
    let criteria: Vec<Criterion<'_>> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("metric oracle equivalence", Box::new(metric_oracles)),
        ("analytic loss values", Box::new(analytic_losses)),
        ("index storage", Box::new(storage)),
        ("precache cost model", Box::new(cost_model)),
        ("retention arithmetic", Box::new(retention_arithmetic)),
        ("end-to-end distillation", Box::new(|| end_to_end(&recipe, &fixture))),
        ("objective ordering", Box::new(|| objective_ordering(&recipe, &fixture))),
        ("pipeline determinism", Box::new(|| determinism(&recipe))),
        ("augmentation bookkeeping", Box::new(augmentation)),
        ("data-efficiency sweep", Box::new(|| sweep(&recipe, &fixture))),
    ];
    let mut lines = Vec::new();
    for (name, f) in &criteria {
        let line = match f() {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(detail) => format!("FAIL  {name}: {detail}"),
        };
        println!("{line}");
        lines.push(line);
    }
    let failed = lines.iter().filter(|l| l.starts_with("FAIL")).count();
    println!("\nacceptance summary ({} criteria, {failed} failed)", lines.len());
    for l in &lines {
        println!("{l}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
