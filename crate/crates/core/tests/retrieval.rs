use std::collections::BTreeSet;

use mmembed::model::Embeddings;
use mmembed::retrieval::{
    evaluate_all_modes, rank_of, retrieve_multimodal, score_report, similarity_matrix, similarity_matrix_threaded,
    Absences, RetrievalMode, SimilarityMatrix,
};
use ndarray::Array2;
use proptest::prelude::*;

mod common;
use common::*;

fn sim(scores: Array2<f64>) -> SimilarityMatrix {
    SimilarityMatrix {
        scores,
        query: "q".into(),
        gallery: "g".into(),
    }
}

#[test]
fn similarity_matches_double_loop() {
    let mut r = rng(1);
    let q = random_matrix(&mut r, 50, 16, 1.0);
    let g = random_matrix(&mut r, 50, 16, 1.0);
    let s = similarity_matrix(q.view(), g.view()).unwrap();
    let t = similarity_matrix_threaded(q.view(), g.view(), 4).unwrap();
    for i in 0..50 {
        for j in 0..50 {
            assert!((s[[i, j]] - dot(&q, i, &g, j)).abs() < 1e-10);
        }
    }
    assert_eq!(s, t);
}

#[test]
fn report_matches_naive_ranking() {
    let mut r = rng(2);
    let scores = random_matrix(&mut r, 50, 50, 1.0);
    let truth: Vec<usize> = (0..50).rev().collect();
    let rep = score_report(&sim(scores.clone()), &truth, &[1, 5, 10], &Absences::default()).unwrap();
    let mut ranks = Vec::new();
    for i in 0..50 {
        let better = (0..50).filter(|&j| scores[[i, j]] > scores[[i, truth[i]]]).count();
        ranks.push(better + 1);
    }
    assert_eq!(rep.ranks, ranks);
    for k in [1, 5, 10] {
        let want = ranks.iter().filter(|&&x| x <= k).count() as f64 / 50.0;
        assert_eq!(rep.recall(k), Some(want));
    }
    let mut sorted = ranks.clone();
    sorted.sort();
    assert_eq!(rep.median_rank, sorted[24] as f64);
}

#[test]
fn identity_embeddings_are_perfect() {
    let eye = Array2::<f64>::eye(8);
    let emb = Embeddings {
        video: eye.clone(),
        audio: Some(eye.clone()),
        text: Some(eye.clone()),
        language: None,
    };
    let reports = evaluate_all_modes(&emb, &[1], 2).unwrap();
    let modes: Vec<_> = reports.iter().map(|r| r.mode.unwrap()).collect();
    assert!(!modes.contains(&RetrievalMode::TplusAtoV));
    assert_eq!(modes.len(), 5);
    for r in &reports {
        assert_eq!(r.recall(1), Some(1.0));
        assert_eq!(r.median_rank, 1.0);
    }
}

#[test]
fn absent_items_rank_last() {
    let eye = Array2::<f64>::eye(4);
    let absent = Absences {
        queries: BTreeSet::from([0]),
        gallery: BTreeSet::from([3]),
    };
    let rep = score_report(&sim(eye), &[0, 1, 2, 3], &[1, 4], &absent).unwrap();
    assert_eq!(rep.ranks, vec![5, 1, 1, 5]);
    assert_eq!(rep.recall(4), Some(0.5));
}

#[test]
fn missing_modality_and_truth_are_errors() {
    let emb = Embeddings {
        video: Array2::eye(3),
        audio: None,
        text: None,
        language: None,
    };
    assert!(retrieve_multimodal(RetrievalMode::AtoV, &emb).is_err());
    assert!(score_report(&sim(Array2::eye(3)), &[0, 1], &[1], &Absences::default()).is_err());
    assert!(score_report(&sim(Array2::eye(3)), &[0, 1, 3], &[1], &Absences::default()).is_err());
}

#[test]
fn mode_names_round_trip() {
    for m in RetrievalMode::ALL {
        assert_eq!(m.name().parse::<RetrievalMode>().unwrap(), m);
    }
    assert_eq!(RetrievalMode::TtoAplusV.name(), "T_to_AplusV");
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..500, n in 2usize..30) {
        let mut r = rng(seed);
        let scores = random_matrix(&mut r, n, n, 1.0);
        let truth: Vec<usize> = (0..n).collect();
        let ks: Vec<usize> = (1..=n).collect();
        let rep = score_report(&sim(scores), &truth, &ks, &Absences::default()).unwrap();
        let recalls: Vec<f64> = ks.iter().map(|&k| rep.recall(k).unwrap()).collect();
        prop_assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(recalls[n - 1], 1.0);
    }

    #[test]
    fn ties_rank_by_index(n in 1usize..20, truth in 0usize..20) {
        let truth = truth % n;
        let row = ndarray::Array1::<f64>::zeros(n);
        prop_assert_eq!(rank_of(row.view(), truth), truth + 1);
    }
}
