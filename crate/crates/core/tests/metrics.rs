//! Hand-computed metric fixtures and metric properties.

use imitkd_core::losses::nll_loss;
use imitkd_core::metrics::{corpus_bleu, length_binned_bleu, perplexity, rouge_scores, sentence_bleu, MetricsReport};
use imitkd_core::models::{ArchKind, ModelConfig, PolicyModel};
use imitkd_core::tensor::Tape;
use imitkd_core::{Corpus, SequencePair, TokenId, Vocabulary, EOS};
use imitkd_core::data::{Provenance, Split};
use proptest::prelude::*;
use std::sync::Arc;

fn w(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_fixtures() {
    let h = vec![w("a b c d e")];
    assert!((corpus_bleu(&h, &h, 4).unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(corpus_bleu(&[w("the the the the")], &[w("the cat")], 4).unwrap(), 0.0);
    let b = corpus_bleu(&[w("a b")], &[w("a b c d")], 4).unwrap();
    assert!((b - 100.0 * (-1f64).exp()).abs() < 1e-9, "{b}");
    assert!((b - 36.787944117144).abs() < 1e-9);
}

#[test]
fn corpus_bleu_pools_counts_before_dividing() {
    // p1 = (3+1)/(3+2), p2 = (2+0)/(2+1), p3 = 1/1, p4 = 0/0 (skipped); c = 5 < r = 7
    let hyps = vec![w("a b c"), w("d x")];
    let refs = vec![w("a b c d e"), w("d e")];
    let geo = (0.8f64 * (2.0 / 3.0) * 1.0).powf(1.0 / 3.0);
    let expect = 100.0 * (1.0f64 - 7.0 / 5.0).exp() * geo;
    assert!((corpus_bleu(&hyps, &refs, 4).unwrap() - expect).abs() < 1e-9);
}

#[test]
fn sentence_bleu_fixtures() {
    let r = w("the cat sat on the mat");
    assert!((sentence_bleu(&r, &r) - 100.0).abs() < 1e-9);
    // p1 = 2/3, p2 = (1+1)/(2+1), p3 = (0+1)/(1+1); BP = exp(1 - 6/3)
    let h = w("the cat ran");
    let expect = 100.0 * (-1f64).exp() * ((2.0 / 3.0) * (2.0 / 3.0) * 0.5f64).powf(1.0 / 3.0);
    assert!((sentence_bleu(&h, &r) - expect).abs() < 1e-9);
    assert_eq!(sentence_bleu(&w("x y z"), &r), 0.0);
}

#[test]
fn sentence_bleu_ranks_overlap_above_disjoint_and_grows_with_correct_tokens() {
    let r: Vec<TokenId> = (4..16).collect();
    let disjoint = sentence_bleu(&[30, 31, 32], &r);
    for k in 1..r.len() {
        let a = sentence_bleu(&r[..k], &r);
        let b = sentence_bleu(&r[..k + 1], &r);
        assert!(a > disjoint);
        assert!(b > a, "k={k}: {a} -> {b}");
    }
}

#[test]
fn rouge_fixtures() {
    let s = rouge_scores(&w("a b c"), &w("a c"));
    assert!((s.rouge_l - 0.8).abs() < 1e-9);
    assert!((s.rouge1 - 0.8).abs() < 1e-9);
    assert_eq!(s.rouge2, 0.0);
    let same = rouge_scores(&w("a b c"), &w("a b c"));
    assert_eq!((same.rouge1, same.rouge2, same.rouge_l), (1.0, 1.0, 1.0));
    let one = rouge_scores(&w("a"), &w("a"));
    assert_eq!(one.rouge2, 1.0);
    let none = rouge_scores(&w("a b"), &w("c d"));
    assert_eq!((none.rouge1, none.rouge2, none.rouge_l), (0.0, 0.0, 0.0));
    // bag-of-words equal, order differs
    let t = rouge_scores(&w("b a c"), &w("a b c"));
    assert_eq!(t.rouge1, 1.0);
    assert!(t.rouge_l < 1.0);
    // bigrams: hyp {ab, bc}, ref {ab, bd}: P = R = 1/2
    assert!((rouge_scores(&w("a b c"), &w("a b d")).rouge2 - 0.5).abs() < 1e-9);
}

fn toy_corpus() -> Corpus {
    let vocab = Arc::new(Vocabulary::new(["a", "b", "c", "d", "e"]).unwrap());
    let pairs = vec![
        SequencePair::new(vec![4, 5], vec![6, 7, EOS], Provenance::Data),
        SequencePair::new(vec![8], vec![4, EOS], Provenance::Data),
        SequencePair::new(vec![5, 6, 7], vec![EOS], Provenance::Data),
    ];
    Corpus::new(pairs, Split::Test, vocab).unwrap()
}

fn small_model(seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        kind: ArchKind::Recurrent,
        layers: 1,
        hidden: 8,
        embed: 6,
        heads: 1,
        ff: 0,
        tied: true,
    };
    PolicyModel::new(cfg, 9, seed).unwrap()
}

#[test]
fn perplexity_is_exp_of_nll_and_uniform_gives_vocab_size() {
    let c = toy_corpus();
    let m = small_model(3);
    let srcs: Vec<&[TokenId]> = c.pairs().iter().map(|p| p.source.as_slice()).collect();
    let tgts: Vec<&[TokenId]> = c.pairs().iter().map(|p| p.target.as_slice()).collect();
    let mut tape = Tape::no_grad();
    let nll = nll_loss(&mut tape, &m, &srcs, &tgts).unwrap().value;
    for batch in [1, 2, 8] {
        let ppl = perplexity(&m, &c, batch).unwrap();
        assert!((ppl - nll.exp()).abs() < 1e-9 * ppl, "{ppl} vs {}", nll.exp());
    }
    let mut u = small_model(3);
    for (_, t) in u.params_mut().iter_mut() {
        t.data_mut().fill(0.0);
    }
    assert!((perplexity(&u, &c, 2).unwrap() - 9.0).abs() < 1e-9);
}

#[test]
fn report_json_is_stable_and_bins_cover_all_pairs() {
    let hyps: Vec<Vec<TokenId>> = vec![vec![4, 5, EOS], (0..30).map(|i| 4 + i % 5).collect(), vec![6; 45]];
    let refs: Vec<Vec<TokenId>> = vec![vec![4, 5, 6, EOS], (0..30).map(|i| 4 + i % 5).collect(), vec![6; 41]];
    let r = MetricsReport::score(&hyps, &refs, 20, 120).unwrap();
    assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 3);
    assert_eq!(r.bins.len(), 3);
    let json = r.to_json().unwrap();
    assert_eq!(json, MetricsReport::score(&hyps, &refs, 20, 120).unwrap().to_json().unwrap());
    let keys: Vec<usize> = ["\"bleu\"", "\"bins\"", "\"rouge1\"", "\"rouge2\"", "\"rouge_l\"", "\"perplexity\""]
        .iter()
        .map(|k| json.find(k).unwrap())
        .collect();
    assert!(keys.windows(2).all(|p| p[0] < p[1]));
    assert_eq!(r.csv_row().split(',').count(), MetricsReport::csv_header().split(',').count());
}

#[test]
fn short_hypotheses_fill_a_single_bin() {
    let hyps: Vec<Vec<TokenId>> = (1..=20).map(|n| vec![4; n]).collect();
    let bins = length_binned_bleu(&hyps, &hyps, 20, 120).unwrap();
    assert_eq!(bins.len(), 1);
    assert_eq!(bins[0].count, 20);
}

fn seqs() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    prop::collection::vec((prop::collection::vec(0u8..6, 1..12), prop::collection::vec(0u8..6, 1..12)), 1..8)
}

proptest! {
    #[test]
    fn corpus_bleu_is_permutation_invariant(pairs in seqs(), rot in 0usize..8) {
        let hyps: Vec<Vec<u8>> = pairs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<Vec<u8>> = pairs.iter().map(|p| p.1.clone()).collect();
        let a = corpus_bleu(&hyps, &refs, 4).unwrap();
        let k = rot % pairs.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        let b = corpus_bleu(&h2, &r2, 4).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
        prop_assert!((corpus_bleu(&hyps, &hyps, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_stays_in_unit_interval(pairs in seqs()) {
        for (h, r) in &pairs {
            let s = rouge_scores(h, r);
            for v in [s.rouge1, s.rouge2, s.rouge_l] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }
    }
}
