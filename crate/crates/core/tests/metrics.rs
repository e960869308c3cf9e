mod common;

use common::{argsort_oracle, cosine_oracle, maxsim_oracle, oracle_equivalence, unit_rows};
use proptest::prelude::*;
use qdistill::embedding::{Embedding, MultiVector};
use qdistill::eval::{ndcg_at_k, pearson, score_cosine, score_maxsim, top_k, Qrels, RetrievalRun};
use qdistill::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embs(m: &qdistill::Matrix) -> Vec<Embedding> {
    m.iter_rows().map(|r| Embedding::from_unit(r.to_vec()).unwrap()).collect()
}

#[test]
fn cosine_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let docs = unit_rows(&mut rng, 100, 64);
    let q = unit_rows(&mut rng, 1, 64);
    let got = score_cosine(&embs(&q)[0], &embs(&docs)).unwrap();
    let rows: Vec<Vec<f64>> = docs.iter_rows().map(<[f64]>::to_vec).collect();
    let want = cosine_oracle(q.row(0), &rows);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-6);
    }
    assert!(score_cosine(&embs(&q)[0], &[]).unwrap().is_empty());
}

#[test]
fn query_equal_to_doc_is_argmax() {
    let basis: Vec<Embedding> = (0..6)
        .map(|i| {
            let mut v = vec![0.0; 6];
            v[i] = 1.0;
            Embedding::from_unit(v).unwrap()
        })
        .collect();
    let s = score_cosine(&basis[3], &basis).unwrap();
    let ids: Vec<String> = (0..6).map(|i| format!("d{i}")).collect();
    assert_eq!(top_k(&ids, &s, 1)[0].0, "d3");
}

/// 50 random instances of at most 200 documents: rankings must match the
/// argsort oracle exactly and scores within 1e-6.
#[test]
fn retrieval_and_ndcg_match_oracles() {
    let checked = oracle_equivalence(2024, 50).unwrap();
    assert!(checked >= 50);
}

#[test]
fn maxsim_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let dim = rng.random_range(2..=32);
        let q = unit_rows(&mut rng, 5, dim);
        let d = unit_rows(&mut rng, 40, dim);
        let qr: Vec<Vec<f64>> = q.iter_rows().map(<[f64]>::to_vec).collect();
        let dr: Vec<Vec<f64>> = d.iter_rows().map(<[f64]>::to_vec).collect();
        let got = score_maxsim(&MultiVector::from_raw(&qr).unwrap(), &MultiVector::from_raw(&dr).unwrap()).unwrap();
        assert!((got - maxsim_oracle(&qr, &dr)).abs() < 1e-6);
    }
}

#[test]
fn maxsim_examples() {
    let mv = |rows: &[[f64; 2]]| MultiVector::from_raw(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    assert_eq!(score_maxsim(&mv(&[[1.0, 0.0]]), &mv(&[[1.0, 0.0], [0.0, 1.0]])).unwrap(), 1.0);
    assert_eq!(score_maxsim(&mv(&[[1.0, 0.0], [0.0, 1.0]]), &mv(&[[1.0, 0.0]])).unwrap(), 1.0);
    let three = MultiVector::from_raw(&[vec![1.0, 0.0, 0.0]]).unwrap();
    assert!(matches!(score_maxsim(&mv(&[[1.0, 0.0]]), &three), Err(Error::DimMismatch { .. })));
}

#[test]
fn ndcg_examples() {
    let mut qrels = Qrels::default();
    qrels.insert("q", "rel", 1);
    let run_with = |pos: usize| {
        let mut ranked: Vec<(String, f64)> = (0..8).map(|i| (format!("x{i}"), 10.0 - i as f64)).collect();
        ranked.insert(pos, ("rel".to_string(), 0.0));
        // Re-score so `rel` lands at `pos` after sorting.
        let ranked: Vec<(String, f64)> = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (d, _))| (d, 100.0 - i as f64))
            .collect();
        let mut run = RetrievalRun::default();
        run.insert("q", ranked).unwrap();
        run
    };
    assert_eq!(ndcg_at_k(&run_with(0), &qrels, 5).unwrap().mean, 1.0);
    let second = ndcg_at_k(&run_with(1), &qrels, 5).unwrap().mean;
    assert!((second - 1.0 / 3f64.log2()).abs() < 1e-12);
    assert!((second - 0.6309).abs() < 1e-4);
    assert_eq!(ndcg_at_k(&run_with(5), &qrels, 5).unwrap().mean, 0.0);
}

#[test]
fn pearson_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::DegenerateInput(_))));
}

fn run_from(scores: &[f64]) -> RetrievalRun {
    let mut run = RetrievalRun::default();
    run.insert(
        "q",
        scores.iter().enumerate().map(|(i, &s)| (format!("d{i:02}"), s)).collect(),
    )
    .unwrap();
    run
}

proptest! {
    #[test]
    fn ndcg_is_bounded(scores in prop::collection::vec(-1.0f64..1.0, 1..30),
                       grades in prop::collection::vec(0u32..4, 1..30)) {
        let mut qrels = Qrels::default();
        for (i, g) in grades.iter().enumerate() {
            qrels.insert("q", &format!("d{i:02}"), *g);
        }
        let r = ndcg_at_k(&run_from(&scores), &qrels, 5).unwrap();
        for v in r.per_query.values() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(v));
        }
    }

    #[test]
    fn perfect_ranking_scores_one(grades in prop::collection::vec(0u32..4, 1..30)) {
        prop_assume!(grades.iter().any(|&g| g > 0));
        let mut qrels = Qrels::default();
        for (i, g) in grades.iter().enumerate() {
            qrels.insert("q", &format!("d{i:02}"), *g);
        }
        let scores: Vec<f64> = grades.iter().map(|&g| g as f64).collect();
        let r = ndcg_at_k(&run_from(&scores), &qrels, 5).unwrap();
        prop_assert!((r.mean - 1.0).abs() < 1e-12);
    }

    /// Reordering zero-grade documents below the cutoff leaves NDCG unchanged.
    #[test]
    fn invariant_below_cutoff(n in 7usize..25, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut qrels = Qrels::default();
        for i in 0..5 {
            qrels.insert("q", &format!("d{i:02}"), rng.random_range(0..3));
        }
        qrels.insert("q", "d00", 1);
        let base: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut shuffled = base.clone();
        for s in &mut shuffled[5..] {
            *s = rng.random_range(0.0..1.0);
        }
        let a = ndcg_at_k(&run_from(&base), &qrels, 5).unwrap().mean;
        let b = ndcg_at_k(&run_from(&shuffled), &qrels, 5).unwrap().mean;
        prop_assert_eq!(a, b);
    }

    /// A one-row query against a doc holding its single vector reduces to cosine.
    #[test]
    fn maxsim_reduces_to_cosine(seed in 0u64..500, extra in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = unit_rows(&mut rng, 1, 8);
        let d = unit_rows(&mut rng, 1 + extra, 8);
        let cos: f64 = q.row(0).iter().zip(d.row(0)).map(|(a, b)| a * b).sum();
        let ms = score_maxsim(
            &MultiVector::from_raw(&[q.row(0).to_vec()]).unwrap(),
            &MultiVector::from_raw(&d.iter_rows().map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap(),
        ).unwrap();
        prop_assert!(ms >= cos - 1e-15);
        if extra == 0 {
            prop_assert!((ms - cos).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_scores_give_identical_runs(scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0]), 1..40)) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("d{i:02}")).collect();
        let a = top_k(&ids, &scores, 10);
        let b = top_k(&ids, &scores, 10);
        prop_assert_eq!(&a, &b);
        let order = argsort_oracle(&ids, &scores);
        let want: Vec<String> = order.iter().take(10).map(|&j| ids[j].clone()).collect();
        let got: Vec<String> = a.into_iter().map(|(d, _)| d).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn grades_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut qrels = Qrels::default();
    qrels.insert("q1", "d1", 2);
    qrels.insert("q1", "d2", 0);
    qrels.insert("q2", "d9", 1);
    let p = dir.path().join("qrels.jsonl");
    qrels.write(&p).unwrap();
    assert_eq!(Qrels::read(&p).unwrap(), qrels);
    let run = run_from(&[0.3, 0.9]);
    let p = dir.path().join("run.jsonl");
    run.write(&p).unwrap();
    assert_eq!(RetrievalRun::read(&p).unwrap(), run);
}
