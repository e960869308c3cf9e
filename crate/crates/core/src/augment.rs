//! Query-record plumbing: ingestion, quality filtering, deduplication,
//! stratified validation split and language-balanced merging of translated
//! queries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::teacher::TeacherCache;

pub const SUPPORTED_LANGUAGES: [&str; 6] = ["en", "fr", "es", "de", "it", "pt"];
pub const DEFAULT_TARGET_LANGUAGES: [&str; 5] = ["pt", "it", "fr", "de", "es"];
pub const DEFAULT_TARGET_PER_LANGUAGE: usize = 200_000;
pub const MAX_QUERY_CHARS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    #[serde(rename = "lang")]
    pub language: String,
    pub source: String,
    pub positive_doc_id: String,
}

pub fn read_records(path: &Path) -> Result<Vec<QueryRecord>> {
    read_jsonl(path)
}

pub fn write_records(path: &Path, records: &[QueryRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Reads several record files in lexicographic path order.
pub fn read_record_files(paths: &[PathBuf]) -> Result<Vec<QueryRecord>> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    let mut out = Vec::new();
    for p in &sorted {
        out.extend(read_records(p)?);
    }
    Ok(out)
}

/// Checks ids are unique and languages supported; returns every problem.
pub fn record_violations(records: &[QueryRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut v = Vec::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            v.push(format!("duplicate id {:?}", r.id));
        }
        if !SUPPORTED_LANGUAGES.contains(&r.language.as_str()) {
            v.push(format!("record {:?} has unsupported language {:?}", r.id, r.language));
        }
    }
    v
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub empty: usize,
    pub too_long: usize,
    pub kept: usize,
}

/// Drops empty/whitespace-only texts and texts longer than 512 characters.
pub fn quality_filter(records: Vec<QueryRecord>) -> (Vec<QueryRecord>, FilterReport) {
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };
    let kept: Vec<QueryRecord> = records
        .into_iter()
        .filter(|r| {
            if r.text.trim().is_empty() {
                report.empty += 1;
                false
            } else if r.text.chars().count() > MAX_QUERY_CHARS {
                report.too_long += 1;
                false
            } else {
                true
            }
        })
        .collect();
    report.kept = kept.len();
    (kept, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub kept: Vec<QueryRecord>,
    pub removed: usize,
}

fn dedup_key(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Keeps the first record of each case-folded, trimmed text, in input order.
pub fn dedup(records: Vec<QueryRecord>) -> DedupOutcome {
    let before = records.len();
    let mut seen = HashSet::new();
    let kept: Vec<QueryRecord> = records
        .into_iter()
        .filter(|r| seen.insert(dedup_key(&r.text)))
        .collect();
    DedupOutcome {
        removed: before - kept.len(),
        kept,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<QueryRecord>,
    pub val: Vec<QueryRecord>,
}

/// Stratum sizes at or above this always contribute at least one record to validation.
pub const MIN_STRATUM_FOR_VAL: usize = 50;

/// Holds out `⌊val_frac·n⌋` records of every (source, language) stratum
/// (at least one once the stratum has 50 records), chosen by a seeded
/// permutation. Both halves keep input order.
pub fn stratified_split(records: &[QueryRecord], val_frac: f64, seed: u64) -> Result<Split> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "val_frac must be in (0, 1), got {val_frac}"
        )));
    }
    let mut strata: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata
            .entry((r.source.as_str(), r.language.as_str()))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; records.len()];
    for members in strata.values_mut() {
        let n = members.len();
        let mut take = (val_frac * n as f64).floor() as usize;
        if take == 0 && n >= MIN_STRATUM_FOR_VAL {
            take = 1;
        }
        members.shuffle(&mut rng);
        for &i in members.iter().take(take) {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in records.iter().zip(is_val) {
        if v {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok(Split { train, val })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePlan {
    pub language: String,
    pub existing: usize,
    pub target: usize,
    pub to_add: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub languages: Vec<LanguagePlan>,
}

impl MergePlan {
    /// Plan from per-language counts. English is never a target.
    pub fn from_counts(counts: &HashMap<String, usize>, targets: &[&str], target_per_lang: usize) -> Self {
        let languages = targets
            .iter()
            .filter(|&&l| l != "en")
            .map(|&l| {
                let existing = counts.get(l).copied().unwrap_or(0);
                LanguagePlan {
                    language: l.to_string(),
                    existing,
                    target: target_per_lang,
                    to_add: target_per_lang.saturating_sub(existing),
                }
            })
            .collect();
        Self { languages }
    }

    pub fn total_to_add(&self) -> usize {
        self.languages.iter().map(|l| l.to_add).sum()
    }

    pub fn combined_count(&self, base: usize) -> usize {
        base + self.total_to_add()
    }

    pub fn is_empty(&self) -> bool {
        self.total_to_add() == 0
    }
}

pub fn language_counts(records: &[QueryRecord]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for r in records {
        *counts.entry(r.language.clone()).or_insert(0) += 1;
    }
    counts
}

pub fn build_merge_plan(records: &[QueryRecord], targets: &[&str], target_per_lang: usize) -> MergePlan {
    MergePlan::from_counts(&language_counts(records), targets, target_per_lang)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub combined: Vec<QueryRecord>,
    pub added: BTreeMap<String, usize>,
}

fn namespaced(lang: &str, id: &str) -> (String, String) {
    let prefix = format!("{lang}:");
    match id.strip_prefix(&prefix) {
        Some(src) => (id.to_string(), src.to_string()),
        None => (format!("{prefix}{id}"), id.to_string()),
    }
}

/// Appends exactly `to_add` seeded-sampled translations per planned language
/// to `base`. Translated ids become `<lang>:<source id>` and inherit the
/// source record's positive document.
pub fn merge_translated(
    base: &[QueryRecord],
    translated: &[QueryRecord],
    plan: &MergePlan,
    seed: u64,
) -> Result<MergeOutcome> {
    let by_id: HashMap<&str, &QueryRecord> = base.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut combined = base.to_vec();
    let mut used: HashSet<String> = base.iter().map(|r| r.id.clone()).collect();
    let mut added = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lp in &plan.languages {
        let mut pool: Vec<&QueryRecord> = translated
            .iter()
            .filter(|r| r.language == lp.language)
            .collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        pool.dedup_by(|a, b| a.id == b.id);
        if pool.len() < lp.to_add {
            return Err(Error::InsufficientTranslations {
                lang: lp.language.clone(),
                needed: lp.to_add,
                available: pool.len(),
            });
        }
        for r in pool.choose_multiple(&mut rng, lp.to_add) {
            let (id, src) = namespaced(&lp.language, &r.id);
            let positive = match by_id.get(src.as_str()) {
                Some(s) => s.positive_doc_id.clone(),
                None => r.positive_doc_id.clone(),
            };
            if !used.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            combined.push(QueryRecord {
                id,
                text: r.text.clone(),
                language: lp.language.clone(),
                source: r.source.clone(),
                positive_doc_id: positive,
            });
        }
        added.insert(lp.language.clone(), lp.to_add);
    }
    Ok(MergeOutcome { combined, added })
}

/// Verifies every record has a teacher query embedding before training.
pub fn preflight(records: &[QueryRecord], cache: &TeacherCache) -> Result<()> {
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !cache.contains(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    match missing.first() {
        None => Ok(()),
        Some(first) if missing.len() == 1 => Err(Error::MissingEmbedding(first.to_string())),
        Some(first) => Err(Error::MissingEmbedding(format!(
            "{first} (and {} more)",
            missing.len() - 1
        ))),
    }
}

/// Seeded random subset of `⌊fraction·n⌋` records, kept in input order.
pub fn random_subset(records: &[QueryRecord], fraction: f64, seed: u64) -> Result<Vec<QueryRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = (fraction * records.len() as f64).floor() as usize;
    if n == 0 {
        return Err(Error::EmptySubset {
            fraction,
            available: records.len(),
        });
    }
    if n == records.len() {
        return Ok(records.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| records[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, text: &str, lang: &str, source: &str) -> QueryRecord {
        QueryRecord {
            id: id.into(),
            text: text.into(),
            language: lang.into(),
            source: source.into(),
            positive_doc_id: format!("doc-{id}"),
        }
    }

    #[test]
    fn dedup_examples() {
        let out = dedup(vec![
            rec("1", "What is X?", "en", "s"),
            rec("2", "what is x?", "en", "s"),
        ]);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].id, "1");
        assert_eq!(out.removed, 1);
        let out = dedup(vec![rec("1", "a", "en", "s"), rec("2", "b", "en", "s")]);
        assert_eq!(out.kept.len(), 2);
        let out = dedup(vec![rec("1", "  Hello ", "en", "s"), rec("2", "hello", "en", "s")]);
        assert_eq!(out.removed, 1);
    }

    #[test]
    fn dedup_idempotent() {
        let recs: Vec<QueryRecord> = (0..50)
            .map(|i| rec(&i.to_string(), &format!("Text {}", i % 7), "en", "s"))
            .collect();
        let once = dedup(recs).kept;
        let twice = dedup(once.clone()).kept;
        assert_eq!(once, twice);
        assert_eq!(once.len(), 7);
    }

    #[test]
    fn quality_filter_counts() {
        let long = "x".repeat(513);
        let ok = "y".repeat(512);
        let (kept, rep) = quality_filter(vec![
            rec("1", "  ", "en", "s"),
            rec("2", "", "en", "s"),
            rec("3", &long, "en", "s"),
            rec("4", &ok, "en", "s"),
        ]);
        assert_eq!(kept.len(), 1);
        assert_eq!(rep, FilterReport { input: 4, empty: 2, too_long: 1, kept: 1 });
    }

    #[test]
    fn split_single_stratum() {
        let recs: Vec<QueryRecord> = (0..100).map(|i| rec(&i.to_string(), "t", "en", "s")).collect();
        let s = stratified_split(&recs, 0.02, 42).unwrap();
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.train.len(), 98);
        assert_eq!(s, stratified_split(&recs, 0.02, 42).unwrap());
        assert_ne!(s.val, stratified_split(&recs, 0.02, 43).unwrap().val);
        assert!(stratified_split(&recs, 0.0, 1).is_err());
        assert!(stratified_split(&recs, 1.0, 1).is_err());
    }

    #[test]
    fn split_minimum_one_for_large_strata() {
        let mut recs: Vec<QueryRecord> = (0..49).map(|i| rec(&format!("a{i}"), "t", "en", "a")).collect();
        recs.extend((0..50).map(|i| rec(&format!("b{i}"), "t", "en", "b")));
        let s = stratified_split(&recs, 0.01, 1).unwrap();
        assert_eq!(s.val.len(), 1);
        assert_eq!(s.val[0].source, "b");
    }

    #[test]
    fn plan_arithmetic() {
        let counts: HashMap<String, usize> = [("it", 53_787), ("de", 250_000), ("en", 5)]
            .iter()
            .map(|(l, c)| (l.to_string(), *c))
            .collect();
        let plan = MergePlan::from_counts(&counts, &["it", "pt", "de", "en"], 200_000);
        assert_eq!(plan.languages.len(), 3);
        assert_eq!(plan.languages[0].to_add, 146_213);
        assert_eq!(plan.languages[1].to_add, 200_000);
        assert_eq!(plan.languages[2].to_add, 0);
    }

    #[test]
    fn merge_insufficient_and_empty() {
        let base = vec![rec("1", "a", "en", "s")];
        let pool: Vec<QueryRecord> = (0..10).map(|i| rec(&format!("pt:{i}"), "t", "pt", "s")).collect();
        let plan = MergePlan {
            languages: vec![LanguagePlan {
                language: "pt".into(),
                existing: 0,
                target: 20,
                to_add: 20,
            }],
        };
        assert!(matches!(
            merge_translated(&base, &pool, &plan, 1),
            Err(Error::InsufficientTranslations { needed: 20, available: 10, .. })
        ));
        let empty = MergePlan { languages: vec![] };
        assert_eq!(merge_translated(&base, &pool, &empty, 1).unwrap().combined, base);
    }

    #[test]
    fn merge_inherits_positive_and_namespaces() {
        let base = vec![rec("e1", "hello", "en", "s"), rec("e2", "world", "en", "s")];
        let pool = vec![
            QueryRecord {
                positive_doc_id: "ignored".into(),
                ..rec("e1", "ola", "pt", "s")
            },
            rec("pt:e2", "mundo", "pt", "s"),
        ];
        let plan = build_merge_plan(&base, &["pt"], 2);
        let out = merge_translated(&base, &pool, &plan, 42).unwrap();
        assert_eq!(out.combined.len(), 4);
        let added: Vec<&QueryRecord> = out.combined[2..].iter().collect();
        let mut ids: Vec<&str> = added.iter().map(|r| r.id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, vec!["pt:e1", "pt:e2"]);
        for r in added {
            let src = &r.id[3..];
            assert_eq!(r.positive_doc_id, format!("doc-{src}"));
        }
    }

    #[test]
    fn subset_sizes() {
        let recs: Vec<QueryRecord> = (0..40).map(|i| rec(&i.to_string(), "t", "en", "s")).collect();
        assert_eq!(random_subset(&recs, 0.25, 1).unwrap().len(), 10);
        assert_eq!(random_subset(&recs, 1.0, 1).unwrap(), recs);
        assert!(matches!(
            random_subset(&recs, 0.01, 1),
            Err(Error::EmptySubset { .. })
        ));
        assert!(random_subset(&recs, 1.5, 1).is_err());
    }

    #[test]
    fn record_checks() {
        let recs = vec![rec("1", "a", "en", "s"), rec("1", "b", "xx", "s")];
        assert_eq!(record_violations(&recs).len(), 2);
    }
}
