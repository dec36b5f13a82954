mod common;

use proptest::prelude::*;
use sqlboot::metrics::{corpus_bleu, diversity};

use common::{fixture, oracle_bleu, read_lines};

#[test]
fn fixture_matches_brute_force() {
    let cands = read_lines(fixture("diversity_candidates.txt"));
    let refs = read_lines(fixture("diversity_references.txt"));
    assert_eq!(cands.len(), 100);
    assert_eq!(refs.len(), 100);
    for n in 1..=4 {
        let fast = corpus_bleu(&cands, &refs, n).unwrap();
        let slow = oracle_bleu(&cands, &refs, n);
        assert!((fast - slow).abs() < 1e-9, "BLEU-{n}: {fast} vs {slow}");
        assert!(fast > 0.0 && fast < 100.0);
    }
}

#[test]
fn identical_corpora_score_one_hundred() {
    let refs = read_lines(fixture("diversity_references.txt"));
    let report = diversity(&refs, &refs).unwrap();
    for (n, s) in &report.bleu {
        assert_eq!(*s, 100.0, "BLEU-{n}");
    }
}

#[test]
fn scores_fall_with_order() {
    let cands = read_lines(fixture("diversity_candidates.txt"));
    let refs = read_lines(fixture("diversity_references.txt"));
    let report = diversity(&cands, &refs).unwrap();
    let scores: Vec<f64> = report.bleu.values().copied().collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["the", "ship", "was", "boarded", "in", "$loc", "?", "pirates", "a"]), 1..12)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn agrees_with_oracle_on_random_corpora(
        pairs in prop::collection::vec((sentence(), sentence()), 1..20),
        n in 1usize..=4,
    ) {
        let (cands, refs): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let fast = corpus_bleu(&cands, &refs, n).unwrap();
        let slow = oracle_bleu(&cands, &refs, n);
        prop_assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
    }
}
