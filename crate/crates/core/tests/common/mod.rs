//! Helpers shared by the integration test targets: finite-difference gradient
//! checks, brute-force metric oracles and small fixtures.
#![allow(dead_code)]

use std::collections::BTreeMap;

use qdistill::augment::QueryRecord;
use qdistill::embedding::{l2_normalize, Embedding, Matrix, MultiVector};
use qdistill::eval::{ndcg_at_k, score_maxsim, DocIndex, Qrels};
use qdistill::encoder::{
    EncoderConfig, EncoderInput, InputMode, ParamGroup, StudentParams, TokenPattern, TokenizerConfig,
};
use qdistill::losses::LossConfig;
use qdistill::trainer::loss_and_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-7;

pub fn grad_check_config(input: InputMode) -> EncoderConfig {
    EncoderConfig {
        tokenizer: TokenizerConfig {
            hash_buckets: 64,
            lowercase: true,
            pattern: TokenPattern::Whitespace,
        },
        input,
        hidden_dim: 8,
        projector_dim: 8,
        output_dim: 16,
    }
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            l2_normalize(&v).unwrap().into_vec()
        })
        .collect();
    Matrix::from_rows(&data).unwrap()
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Parameters at O(1) scale so that a 1e-5 perturbation is small relative to
/// the curvature of the normalized output.
fn wide_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> StudentParams {
    let mut p = StudentParams::zeros(cfg);
    let n = Normal::new(0.0, 0.5).unwrap();
    for g in ParamGroup::ALL {
        for v in p.group_mut(g) {
            *v = n.sample(rng);
        }
    }
    p
}

/// Compares analytic gradients of the batch loss against central finite
/// differences on `coords` random coordinates spread over every parameter
/// group (backbone coordinates are drawn from rows the batch touches).
pub fn gradient_check(loss: &LossConfig, input: InputMode, seed: u64, coords: usize) -> GradCheck {
    let cfg = grad_check_config(input);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = wide_params(&cfg, &mut rng);
    let batch = 6;
    let inputs: Vec<EncoderInput> = (0..batch)
        .map(|_| match input {
            InputMode::EmbeddingBag => {
                let len = rng.random_range(2..=6);
                EncoderInput::Tokens((0..len).map(|_| rng.random_range(0..cfg.tokenizer.hash_buckets)).collect())
            }
            InputMode::ExternalFeatures => {
                EncoderInput::Features((0..cfg.hidden_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            }
        })
        .collect();
    let refs: Vec<&EncoderInput> = inputs.iter().collect();
    let teacher = unit_rows(&mut rng, batch, cfg.output_dim);
    let docs = unit_rows(&mut rng, batch, cfg.output_dim);
    let docs = loss.needs_documents().then_some(&docs);

    let (_, _, grads) = loss_and_gradients(&params, loss, &refs, &teacher, docs).unwrap();
    let f = |p: &StudentParams| loss_and_gradients(p, loss, &refs, &teacher, docs).unwrap().0;

    let mut touched: Vec<usize> = inputs
        .iter()
        .flat_map(|i| match i {
            EncoderInput::Tokens(t) => t.clone(),
            EncoderInput::Features(_) => Vec::new(),
        })
        .collect();
    touched.sort_unstable();
    touched.dedup();

    let mut groups: Vec<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|&g| !params.group(g).is_empty())
        .collect();
    if touched.is_empty() {
        groups.retain(|&g| g != ParamGroup::Backbone);
    }

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for c in 0..coords {
        let g = groups[c % groups.len()];
        let idx = if g == ParamGroup::Backbone {
            let row = touched[rng.random_range(0..touched.len())];
            row * cfg.hidden_dim + rng.random_range(0..cfg.hidden_dim)
        } else {
            rng.random_range(0..params.group(g).len())
        };
        let orig = params.group(g)[idx];
        params.group_mut(g)[idx] = orig + FD_EPS;
        let up = f(&params);
        params.group_mut(g)[idx] = orig - FD_EPS;
        let down = f(&params);
        params.group_mut(g)[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        let analytic = grads.get(g, idx);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{}[{idx}]: analytic {analytic:e}, numeric {numeric:e}", g.name());
        }
    }
    GradCheck {
        checked: coords,
        max_rel_err: max_rel,
        worst,
    }
}

/// DCG/IDCG computed straight from the definition over a full ranked list.
pub fn ndcg_oracle(ranked: &[String], grades: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let mut dcg = 0.0;
    for (pos, d) in ranked.iter().enumerate() {
        if pos >= k {
            break;
        }
        let g = *grades.get(d).unwrap_or(&0) as f64;
        dcg += (2f64.powf(g) - 1.0) / (pos as f64 + 2.0).log2();
    }
    let mut ideal: Vec<u32> = grades.values().copied().collect();
    ideal.sort();
    ideal.reverse();
    let mut idcg = 0.0;
    for (pos, g) in ideal.iter().enumerate().take(k) {
        idcg += (2f64.powf(*g as f64) - 1.0) / (pos as f64 + 2.0).log2();
    }
    (idcg > 0.0).then(|| dcg / idcg)
}

/// Exhaustive argsort by (score descending, id ascending) using a
/// comparison-count insertion sort.
pub fn argsort_oracle(ids: &[String], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::new();
    for i in 0..ids.len() {
        let mut pos = order.len();
        for (p, &j) in order.iter().enumerate() {
            let before = scores[i] > scores[j] || (scores[i] == scores[j] && ids[i] < ids[j]);
            if before {
                pos = p;
                break;
            }
        }
        order.insert(pos, i);
    }
    order
}

pub fn cosine_oracle(q: &[f64], docs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; docs.len()];
    for j in 0..docs.len() {
        for t in 0..q.len() {
            out[j] += q[t] * docs[j][t];
        }
    }
    out
}

pub fn maxsim_oracle(q: &[Vec<f64>], d: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for qi in q {
        let mut best = f64::NEG_INFINITY;
        for dj in d {
            let mut s = 0.0;
            for t in 0..qi.len() {
                s += qi[t] * dj[t];
            }
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    total
}

pub fn record(id: &str, text: &str, lang: &str, source: &str) -> QueryRecord {
    QueryRecord {
        id: id.to_string(),
        text: text.to_string(),
        language: lang.to_string(),
        source: source.to_string(),
        positive_doc_id: format!("doc-{id}"),
    }
}

/// Random retrieval instances (at most 200 documents, duplicated vectors so
/// that ties occur) checked against the oracles: rankings exactly, scores
/// within 1e-6, NDCG@5 within 1e-12. Also compares MaxSim against the triple
/// loop once per instance. Returns the number of queries checked.
pub fn oracle_equivalence(seed: u64, instances: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for inst in 0..instances {
        let n_docs = rng.random_range(1..=200);
        let dim = rng.random_range(2..=24);
        let n_queries = rng.random_range(1..=8);
        let docs = unit_rows(&mut rng, n_docs, dim);
        let ids: Vec<String> = (0..n_docs).map(|i| format!("doc{i:03}")).collect();
        let mut rows: Vec<Vec<f64>> = docs.iter_rows().map(<[f64]>::to_vec).collect();
        for _ in 0..n_docs / 10 {
            let (a, b) = (rng.random_range(0..n_docs), rng.random_range(0..n_docs));
            rows[a] = rows[b].clone();
        }
        let index = DocIndex::new(
            ids.iter()
                .cloned()
                .zip(rows.iter().map(|r| Embedding::from_unit(r.clone()).unwrap()))
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        let queries = unit_rows(&mut rng, n_queries, dim);
        let mut qrels = Qrels::default();
        let qlist: Vec<(String, Embedding)> = queries
            .iter_rows()
            .enumerate()
            .map(|(i, r)| (format!("q{i}"), Embedding::from_unit(r.to_vec()).unwrap()))
            .collect();
        for (qid, _) in &qlist {
            for _ in 0..rng.random_range(1..=4) {
                let d = &ids[rng.random_range(0..n_docs)];
                qrels.insert(qid, d, rng.random_range(0..=3));
            }
        }
        let run = index.retrieve(&qlist, n_docs).map_err(|e| e.to_string())?;
        let result = ndcg_at_k(&run, &qrels, 5).map_err(|e| e.to_string())?;
        let mut oracle_sum = 0.0;
        let mut oracle_n = 0;
        for (qid, q) in &qlist {
            let scores = cosine_oracle(q.as_slice(), &rows);
            let order = argsort_oracle(&ids, &scores);
            let ranked = run.get(qid).ok_or(format!("instance {inst}: {qid} missing"))?;
            if ranked.len() != order.len() {
                return Err(format!("instance {inst} {qid}: length {} vs {}", ranked.len(), order.len()));
            }
            for ((d, s), &j) in ranked.iter().zip(&order) {
                if d != &ids[j] {
                    return Err(format!("instance {inst} {qid}: ranking differs at {d} vs {}", ids[j]));
                }
                if (s - scores[j]).abs() >= 1e-6 {
                    return Err(format!("instance {inst} {qid}: score {s} vs {}", scores[j]));
                }
            }
            let ranked_ids: Vec<String> = order.iter().map(|&j| ids[j].clone()).collect();
            let grades = qrels.grades(qid).cloned().unwrap_or_default();
            match ndcg_oracle(&ranked_ids, &grades, 5) {
                Some(v) => {
                    let got = result.per_query.get(qid).copied().unwrap_or(f64::NAN);
                    if got.is_nan() || (got - v).abs() >= 1e-12 {
                        return Err(format!("instance {inst} {qid}: ndcg {got} vs {v}"));
                    }
                    oracle_sum += v;
                    oracle_n += 1;
                }
                None => {
                    if result.per_query.contains_key(qid) {
                        return Err(format!("instance {inst} {qid}: should be excluded"));
                    }
                }
            }
            checked += 1;
        }
        if result.excluded != n_queries - oracle_n {
            return Err(format!("instance {inst}: excluded {} vs {}", result.excluded, n_queries - oracle_n));
        }
        if oracle_n > 0 && (result.mean - oracle_sum / oracle_n as f64).abs() >= 1e-12 {
            return Err(format!("instance {inst}: mean ndcg differs"));
        }

        let qr: Vec<Vec<f64>> = queries.iter_rows().map(<[f64]>::to_vec).collect();
        let take = rng.random_range(1..=n_docs.min(40));
        let dr = &rows[..take];
        let got = score_maxsim(
            &MultiVector::from_raw(&qr).map_err(|e| e.to_string())?,
            &MultiVector::from_raw(dr).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let want = maxsim_oracle(&qr, dr);
        if (got - want).abs() >= 1e-6 {
            return Err(format!("instance {inst}: maxsim {got} vs {want}"));
        }
    }
    Ok(checked)
}
