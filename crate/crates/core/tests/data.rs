//! Corpus files, synthetic task shape, subsampling.

use imitkd_core::data::{gen_toy_translation, Split, ToyTaskConfig};
use imitkd_core::metrics::length_binned_bleu;
use imitkd_core::{Corpus, Error, TokenId, Vocabulary, EOS, UNK};
use proptest::prelude::*;
use std::collections::HashSet;
use std::sync::Arc;

fn abcd() -> Arc<Vocabulary> {
    Arc::new(Vocabulary::new(["a", "b", "c", "d"]).unwrap())
}

#[test]
fn loads_one_tab_separated_pair() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tsv");
    std::fs::write(&path, "a b\tc d\n").unwrap();
    let (c, oov) = Corpus::load(&path, abcd(), Split::Train).unwrap();
    assert_eq!(oov, 0);
    assert_eq!(c.len(), 1);
    let v = c.vocab();
    let id = |w| v.id(w).unwrap();
    assert_eq!(c.pairs()[0].source, vec![id("a"), id("b")]);
    assert_eq!(c.pairs()[0].target, vec![id("c"), id("d"), EOS]);
}

#[test]
fn unknown_tokens_become_unk_and_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tsv");
    std::fs::write(&path, "a zz\tc\nqq b\tyy xx\n").unwrap();
    let (c, oov) = Corpus::load(&path, abcd(), Split::Valid).unwrap();
    assert_eq!(oov, 4);
    let unks = c.pairs().iter().flat_map(|p| p.source.iter().chain(&p.target)).filter(|&&t| t == UNK).count();
    assert_eq!(unks, 4);
}

#[test]
fn malformed_lines_report_their_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tsv");
    std::fs::write(&path, "a\tb\nno tab here\n").unwrap();
    match Corpus::load(&path, abcd(), Split::Test) {
        Err(Error::Data { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn thousand_pair_round_trip_is_byte_identical() {
    let cfg = ToyTaskConfig { n_pairs: 1000, valid_fraction: 0.0, test_pairs: 10, ..ToyTaskConfig::default() };
    let s = gen_toy_translation(&cfg).unwrap();
    assert_eq!(s.train.len(), 1000);
    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path()).unwrap();
    let first = std::fs::read(dir.path().join("train.tsv")).unwrap();
    let back = imitkd_core::data::CorpusSplits::load(dir.path()).unwrap();
    assert_eq!(back.train, s.train);
    let again = dir.path().join("again.tsv");
    back.train.save(&again).unwrap();
    assert_eq!(std::fs::read(again).unwrap(), first);
}

#[test]
fn long_range_corpus_spans_several_length_bins() {
    let cfg = ToyTaskConfig { n_pairs: 600, test_pairs: 10, len_range: (5, 60), ..ToyTaskConfig::default() };
    let s = gen_toy_translation(&cfg).unwrap();
    let targets: Vec<Vec<TokenId>> = s.train.pairs().iter().map(|p| p.target_tokens().to_vec()).collect();
    assert!(targets.iter().any(|t| t.len() > 40));
    let bins = length_binned_bleu(&targets, &targets, 20, 120).unwrap();
    assert!(bins.len() >= 3, "{bins:?}");
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), targets.len());
}

#[test]
fn subsample_is_a_seeded_ordered_subset() {
    let s = gen_toy_translation(&ToyTaskConfig { n_pairs: 500, test_pairs: 10, ..ToyTaskConfig::default() }).unwrap();
    let a = s.train.subsample(0.3, 7).unwrap();
    assert_eq!(a, s.train.subsample(0.3, 7).unwrap());
    assert_ne!(a, s.train.subsample(0.3, 8).unwrap());
    let pos: Vec<usize> = a.pairs().iter().map(|p| s.train.pairs().iter().position(|q| q == p).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert!(s.train.subsample(1.5, 7).is_err());
}

#[test]
fn insertion_noise_lengthens_targets() {
    let base = ToyTaskConfig { n_pairs: 400, test_pairs: 10, noise_rate: 0.0, ..ToyTaskConfig::default() };
    let clean = gen_toy_translation(&base).unwrap();
    assert!(clean.train.pairs().iter().all(|p| p.target_tokens().len() == p.source.len()));
    let noisy = gen_toy_translation(&ToyTaskConfig { noise_rate: 0.3, ..base }).unwrap();
    let extra: usize = noisy.train.pairs().iter().map(|p| p.target_tokens().len() - p.source.len()).sum();
    let total: usize = noisy.train.pairs().iter().map(|p| p.source.len()).sum();
    let rate = extra as f64 / total as f64;
    assert!((rate - 0.3).abs() < 0.03, "{rate}");
}

#[test]
fn default_task_is_large_enough() {
    let s = gen_toy_translation(&ToyTaskConfig::default()).unwrap();
    assert!(s.train.len() >= 4800);
    assert_eq!(s.vocab.len(), 40);
    let all: HashSet<&[TokenId]> = s.train.sources().chain(s.valid.sources()).chain(s.test.sources()).collect();
    assert_eq!(all.len(), s.train.len() + s.valid.len() + s.test.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn generated_pairs_are_in_range(seed in 0u64..1000, lo in 2usize..5, span in 0usize..8) {
        let cfg = ToyTaskConfig { seed, n_pairs: 60, test_pairs: 5, len_range: (lo, lo + span), ..ToyTaskConfig::default() };
        let s = gen_toy_translation(&cfg).unwrap();
        for p in s.train.pairs().iter().chain(s.test.pairs()) {
            prop_assert!((lo..=lo + span).contains(&p.source.len()));
            prop_assert_eq!(p.target.last(), Some(&EOS));
            prop_assert!(p.target_tokens().len() >= p.source.len());
        }
    }
}
