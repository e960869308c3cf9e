//! A synthetic teacher with a topic-mixture geometry.
//!
//! Topic centers are random unit vectors. Each document is its topic center
//! plus isotropic noise, normalized; each query is its positive document plus
//! noise, normalized. Query texts are drawn from a pseudo-word vocabulary so
//! that a text-only student can recover the document (and topic) from the
//! words: two words identify the document, two the topic, the rest are
//! filler. Non-English surface forms are distinct words, which is what makes
//! language coverage matter.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CacheKind, Dtype, TeacherCache};
use crate::augment::QueryRecord;
use crate::embedding::l2_normalize;
use crate::error::{Error, Result};
use crate::eval::Qrels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageShare {
    pub lang: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTeacherSpec {
    pub dim: usize,
    pub num_topics: usize,
    pub num_docs: usize,
    pub num_queries: usize,
    pub topic_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub languages: Vec<LanguageShare>,
    pub topic_words: usize,
    pub doc_words: usize,
    pub filler_words: usize,
    pub dtype: Dtype,
}

impl Default for SyntheticTeacherSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            num_topics: 16,
            num_docs: 512,
            num_queries: 2048,
            topic_spread: 0.15,
            noise_sigma: 0.10,
            seed: 42,
            languages: vec![LanguageShare {
                lang: "en".into(),
                weight: 1.0,
            }],
            topic_words: 8,
            doc_words: 3,
            filler_words: 40,
            dtype: Dtype::F16,
        }
    }
}

impl SyntheticTeacherSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, n) in [
            ("dim", self.dim),
            ("num_topics", self.num_topics),
            ("num_docs", self.num_docs),
            ("topic_words", self.topic_words),
            ("filler_words", self.filler_words),
        ] {
            if n == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.doc_words < 2 {
            v.push("doc_words must be at least 2".into());
        }
        if self.num_topics > self.num_docs {
            v.push(format!(
                "num_topics ({}) must not exceed num_docs ({})",
                self.num_topics, self.num_docs
            ));
        }
        if !(self.topic_spread >= 0.0 && self.topic_spread.is_finite()) {
            v.push("topic_spread must be finite and >= 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            v.push("noise_sigma must be finite and >= 0".into());
        }
        if self.languages.is_empty() {
            v.push("languages must not be empty".into());
        }
        for l in &self.languages {
            if !(l.weight >= 0.0 && l.weight.is_finite()) {
                v.push(format!("language {} has invalid weight {}", l.lang, l.weight));
            }
            if lang_offset(&l.lang).is_none() {
                v.push(format!("unsupported language {:?}", l.lang));
            }
        }
        if self.languages.iter().map(|l| l.weight).sum::<f64>() <= 0.0 {
            v.push("language weights must sum to a positive value".into());
        }
        v
    }
}

pub const LANGUAGES: [&str; 6] = ["en", "fr", "es", "de", "it", "pt"];

fn lang_offset(lang: &str) -> Option<u64> {
    LANGUAGES
        .iter()
        .position(|l| *l == lang)
        .map(|i| i as u64 * 10_000_000)
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pronounceable word for a vocabulary index; injective.
pub fn pseudo_word(mut n: u64) -> String {
    let base = (CONSONANTS.len() * VOWELS.len()) as u64;
    let mut digits = Vec::new();
    loop {
        digits.push(n % base);
        n /= base;
        if n == 0 {
            break;
        }
    }
    while digits.len() < 2 {
        digits.push(0);
    }
    let mut s = String::with_capacity(digits.len() * 2);
    for &d in digits.iter().rev() {
        let d = d as usize;
        s.push(CONSONANTS[d / VOWELS.len()] as char);
        s.push(VOWELS[d % VOWELS.len()] as char);
    }
    s
}

/// Vocabulary indices are laid out as: fillers, then topic words, then
/// document words.
struct Vocab {
    filler: u64,
    topic_base: u64,
    doc_base: u64,
    topic_words: u64,
    doc_words: u64,
}

impl Vocab {
    fn new(spec: &SyntheticTeacherSpec) -> Self {
        let filler = spec.filler_words as u64;
        let topic_base = filler;
        let doc_base = topic_base + (spec.num_topics * spec.topic_words) as u64;
        Self {
            filler,
            topic_base,
            doc_base,
            topic_words: spec.topic_words as u64,
            doc_words: spec.doc_words as u64,
        }
    }

    fn topic_word(&self, topic: usize, k: usize) -> u64 {
        self.topic_base + topic as u64 * self.topic_words + k as u64
    }

    fn doc_word(&self, doc: usize, k: usize) -> u64 {
        self.doc_base + doc as u64 * self.doc_words + k as u64
    }

    fn end(&self, num_docs: usize) -> u64 {
        self.doc_base + num_docs as u64 * self.doc_words
    }
}

fn surface(n: u64, lang: &str) -> String {
    pseudo_word(n + lang_offset(lang).unwrap_or(0))
}

#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    pub queries: Vec<QueryRecord>,
    pub query_cache: TeacherCache,
    pub doc_cache: TeacherCache,
    pub qrels: Qrels,
    /// Topic of each document, in document order.
    pub doc_topics: Vec<usize>,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(e) = l2_normalize(&v) {
            return e.into_vec();
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let v: Vec<f64> = base.iter().map(|b| b + noise.sample(rng)).collect();
    Ok(l2_normalize(&v)?.into_vec())
}

pub fn generate_synthetic_teacher(spec: &SyntheticTeacherSpec) -> Result<SyntheticTeacher> {
    let violations = spec.violations();
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(violations.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = Vocab::new(spec);

    let centers: Vec<Vec<f64>> = (0..spec.num_topics)
        .map(|_| gaussian_unit(&mut rng, spec.dim))
        .collect();

    let mut doc_cache = TeacherCache::new(CacheKind::Document, spec.dtype, spec.dim)?;
    let mut doc_vectors = Vec::with_capacity(spec.num_docs);
    let mut doc_topics = Vec::with_capacity(spec.num_docs);
    for d in 0..spec.num_docs {
        let topic = d % spec.num_topics;
        let v = perturb(&mut rng, &centers[topic], spec.topic_spread)?;
        doc_cache.push(&doc_id(d), &v)?;
        doc_vectors.push(v);
        doc_topics.push(topic);
    }

    let weights: Vec<f64> = spec.languages.iter().map(|l| l.weight).collect();
    let lang_dist = rand::distr::weighted::WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidConfig(format!("language weights: {e}")))?;

    let mut query_cache = TeacherCache::new(CacheKind::Query, spec.dtype, spec.dim)?;
    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut qrels = Qrels::default();
    let doc_word_idx: Vec<usize> = (0..spec.doc_words).collect();
    let topic_word_idx: Vec<usize> = (0..spec.topic_words).collect();
    for q in 0..spec.num_queries {
        let d = rng.random_range(0..spec.num_docs);
        let topic = doc_topics[d];
        let lang = &spec.languages[lang_dist.sample(&mut rng)].lang;
        let v = perturb(&mut rng, &doc_vectors[d], spec.noise_sigma)?;

        let mut words: Vec<u64> = Vec::new();
        words.extend(doc_word_idx.choose_multiple(&mut rng, 2).map(|&k| vocab.doc_word(d, k)));
        let n_topic = spec.topic_words.min(2);
        words.extend(
            topic_word_idx
                .choose_multiple(&mut rng, n_topic)
                .map(|&k| vocab.topic_word(topic, k)),
        );
        let n_filler = rng.random_range(1..=2);
        for _ in 0..n_filler {
            words.push(rng.random_range(0..vocab.filler));
        }
        words.shuffle(&mut rng);
        let text = words
            .iter()
            .map(|&w| surface(w, lang))
            .collect::<Vec<_>>()
            .join(" ");

        let id = query_id(q);
        query_cache.push(&id, &v)?;
        qrels.insert(&id, &doc_id(d), 1);
        queries.push(QueryRecord {
            id,
            text,
            language: lang.clone(),
            source: "synthetic".into(),
            positive_doc_id: doc_id(d),
        });
    }
    Ok(SyntheticTeacher {
        queries,
        query_cache,
        doc_cache,
        qrels,
        doc_topics,
    })
}

pub fn query_id(i: usize) -> String {
    format!("q{i:06}")
}

pub fn doc_id(i: usize) -> String {
    format!("d{i:05}")
}

/// Word-for-word "translations" of English synthetic queries into `lang`,
/// paired with the source query's teacher embedding (the synthetic teacher is
/// language-agnostic). Translated ids are `<lang>:<source id>`.
pub fn synthetic_translations(
    spec: &SyntheticTeacherSpec,
    sources: &[QueryRecord],
    query_cache: &TeacherCache,
    lang: &str,
) -> Result<(Vec<QueryRecord>, TeacherCache)> {
    if lang_offset(lang).is_none() {
        return Err(Error::InvalidConfig(format!("unsupported language {lang:?}")));
    }
    let vocab = Vocab::new(spec);
    let dictionary: HashMap<String, u64> = (0..vocab.end(spec.num_docs))
        .map(|n| (surface(n, "en"), n))
        .collect();
    let mut records = Vec::new();
    let mut cache = TeacherCache::new(CacheKind::Query, query_cache.dtype(), query_cache.dim())?;
    for src in sources.iter().filter(|r| r.language == "en") {
        let text = src
            .text
            .split_whitespace()
            .map(|w| match dictionary.get(w) {
                Some(&n) => surface(n, lang),
                None => w.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ");
        let id = format!("{lang}:{}", src.id);
        let raw: Vec<f64> = query_cache
            .raw(&src.id)?
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        cache.push(&id, &raw)?;
        records.push(QueryRecord {
            id,
            text,
            language: lang.to_string(),
            source: src.source.clone(),
            positive_doc_id: src.positive_doc_id.clone(),
        });
    }
    Ok((records, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{dot, norm};
    use std::collections::HashSet;

    fn small_spec() -> SyntheticTeacherSpec {
        SyntheticTeacherSpec {
            dim: 16,
            num_topics: 4,
            num_docs: 40,
            num_queries: 100,
            dtype: Dtype::F32,
            ..Default::default()
        }
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let words: HashSet<String> = (0..20_000).map(pseudo_word).collect();
        assert_eq!(words.len(), 20_000);
        assert_eq!(pseudo_word(0), "baba");
        assert!(words.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn all_embeddings_unit_norm() {
        let t = generate_synthetic_teacher(&small_spec()).unwrap();
        for cache in [&t.query_cache, &t.doc_cache] {
            for id in cache.ids() {
                let raw: Vec<f64> = cache.raw(id).unwrap().iter().map(|&v| f64::from(v)).collect();
                assert!((norm(&raw) - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(t.queries.len(), 100);
        assert_eq!(t.doc_cache.len(), 40);
        assert_eq!(t.qrels.len(), 100);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic_teacher(&small_spec()).unwrap();
        let b = generate_synthetic_teacher(&small_spec()).unwrap();
        assert_eq!(a.query_cache, b.query_cache);
        assert_eq!(a.doc_cache, b.doc_cache);
        assert_eq!(a.queries, b.queries);
        let mut spec = small_spec();
        spec.seed += 1;
        let c = generate_synthetic_teacher(&spec).unwrap();
        assert_ne!(a.query_cache, c.query_cache);
    }

    #[test]
    fn zero_noise_queries_equal_documents() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        spec.topic_spread = 0.0;
        let t = generate_synthetic_teacher(&spec).unwrap();
        for q in &t.queries {
            assert_eq!(
                t.query_cache.raw(&q.id).unwrap(),
                t.doc_cache.raw(&q.positive_doc_id).unwrap()
            );
        }
    }

    #[test]
    fn zero_noise_positive_is_top_ranked() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let t = generate_synthetic_teacher(&spec).unwrap();
        let docs = t.doc_cache.embeddings().unwrap();
        for q in &t.queries {
            let qv = t.query_cache.embedding(&q.id).unwrap();
            let pos = t.doc_cache.embedding(&q.positive_doc_id).unwrap();
            let pos_score = dot(qv.as_slice(), pos.as_slice());
            for (id, d) in &docs {
                if *id != q.positive_doc_id {
                    assert!(dot(qv.as_slice(), d.as_slice()) < pos_score);
                }
            }
        }
    }

    #[test]
    fn query_text_carries_document_words() {
        let spec = small_spec();
        let t = generate_synthetic_teacher(&spec).unwrap();
        let vocab = Vocab::new(&spec);
        for q in &t.queries {
            let d: usize = q.positive_doc_id[1..].parse().unwrap();
            let doc_words: Vec<String> = (0..spec.doc_words)
                .map(|k| surface(vocab.doc_word(d, k), "en"))
                .collect();
            let hits = q.text.split(' ').filter(|w| doc_words.iter().any(|d| d == w)).count();
            assert_eq!(hits, 2, "{}", q.text);
        }
    }

    #[test]
    fn translations_share_teacher_embeddings() {
        let spec = small_spec();
        let t = generate_synthetic_teacher(&spec).unwrap();
        let (recs, cache) = synthetic_translations(&spec, &t.queries[..5], &t.query_cache, "pt").unwrap();
        assert_eq!(recs.len(), 5);
        for (r, src) in recs.iter().zip(&t.queries) {
            assert_eq!(r.id, format!("pt:{}", src.id));
            assert_eq!(r.language, "pt");
            assert_eq!(r.positive_doc_id, src.positive_doc_id);
            assert_ne!(r.text, src.text);
            assert_eq!(r.text.split(' ').count(), src.text.split(' ').count());
            assert_eq!(cache.raw(&r.id).unwrap(), t.query_cache.raw(&src.id).unwrap());
        }
        assert!(synthetic_translations(&spec, &t.queries, &t.query_cache, "xx").is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = small_spec();
        spec.num_topics = 100;
        spec.noise_sigma = -1.0;
        spec.languages = vec![LanguageShare { lang: "zz".into(), weight: 1.0 }];
        assert_eq!(spec.violations().len(), 3);
        assert!(generate_synthetic_teacher(&spec).is_err());
    }
}
