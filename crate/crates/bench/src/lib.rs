//! Shared fixtures for the criterion benches: default-shaped models on the toy corpus.

use imitkd_core::data::{gen_toy_translation, ToyTaskConfig};
use imitkd_core::{Corpus, ModelConfig, PolicyModel, TokenId};

pub struct Fixture {
    pub student: PolicyModel,
    pub teacher: PolicyModel,
    pub test: Corpus,
    pub train: Corpus,
}

impl Fixture {
    /// Untrained default student and teacher; timings depend on shapes, not weights.
    pub fn new() -> Self {
        let cfg = ToyTaskConfig { n_pairs: 400, test_pairs: 64, ..ToyTaskConfig::default() };
        let s = gen_toy_translation(&cfg).expect("toy corpus");
        let v = s.vocab.len();
        Fixture {
            student: PolicyModel::new(ModelConfig::default_student(), v, 1).expect("student"),
            teacher: PolicyModel::new(ModelConfig::default_teacher(), v, 2).expect("teacher"),
            test: s.test,
            train: s.train,
        }
    }

    pub fn sources(&self, n: usize) -> Vec<&[TokenId]> {
        self.test.sources().take(n).collect()
    }

    pub fn batch(&self, n: usize) -> (Vec<&[TokenId]>, Vec<&[TokenId]>) {
        let p = &self.train.pairs()[..n];
        (p.iter().map(|x| x.source.as_slice()).collect(), p.iter().map(|x| x.target.as_slice()).collect())
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
