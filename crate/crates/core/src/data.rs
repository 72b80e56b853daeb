//! Vocabulary, sequence pairs, corpora and the synthetic translation task.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_STRINGS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bijection between token strings and ids; ids 0..4 are the fixed specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        for tok in content {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {tok:?}")));
            }
            if index.contains_key(&tok) {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
            index.insert(tok.clone(), tokens.len());
            tokens.push(tok);
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIAL_STRINGS[UNK])
    }

    /// Content (non-special) tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// Space-joined tokens, stopping at the first EOS and skipping PAD/BOS.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in self.content_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocabulary::new(text.lines().filter(|l| !l.is_empty()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Data,
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePair {
    pub source: Vec<TokenId>,
    /// Target ids; corpus targets end with EOS.
    pub target: Vec<TokenId>,
    pub provenance: Provenance,
}

impl SequencePair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>, provenance: Provenance) -> Self {
        SequencePair {
            source,
            target,
            provenance,
        }
    }

    /// Target tokens without the trailing EOS.
    pub fn target_tokens(&self) -> &[TokenId] {
        strip_eos(&self.target)
    }
}

pub fn strip_eos(ids: &[TokenId]) -> &[TokenId] {
    match ids.iter().position(|&t| t == EOS) {
        Some(p) => &ids[..p],
        None => ids,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pairs: Vec<SequencePair>,
    split: Split,
    vocab: Arc<Vocabulary>,
}

impl Corpus {
    pub fn new(pairs: Vec<SequencePair>, split: Split, vocab: Arc<Vocabulary>) -> Result<Self> {
        let size = vocab.len();
        for p in &pairs {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::Contract("sequence pairs must be nonempty".into()));
            }
            if let Some(&t) = p.source.iter().chain(&p.target).find(|&&t| t >= size) {
                return Err(Error::Vocab { token: t, size });
            }
        }
        Ok(Corpus { pairs, split, vocab })
    }

    pub fn pairs(&self) -> &[SequencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn sources(&self) -> impl Iterator<Item = &[TokenId]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    /// Mean target length in tokens, EOS excluded.
    pub fn mean_target_len(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.target_tokens().len()).sum::<usize>() as f64 / self.pairs.len() as f64
    }

    /// Same sources, new targets (e.g. teacher outputs for D*).
    pub fn with_targets(&self, targets: Vec<Vec<TokenId>>, provenance: Provenance) -> Result<Corpus> {
        if targets.len() != self.pairs.len() {
            return Err(Error::Contract("target count does not match corpus".into()));
        }
        let pairs = self
            .pairs
            .iter()
            .zip(targets)
            .map(|(p, t)| SequencePair::new(p.source.clone(), t, provenance))
            .collect();
        Corpus::new(pairs, self.split, self.vocab.clone())
    }

    /// TSV text: `source tokens \t target tokens`, one pair per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{}\t{}",
                self.vocab.detokenize(&p.source),
                self.vocab.detokenize(&p.target)
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Loads a TSV corpus; unknown tokens become UNK and are counted.
    pub fn load(path: &Path, vocab: Arc<Vocabulary>, split: Split) -> Result<(Corpus, usize)> {
        let text = fs::read_to_string(path)?;
        let mut oov = 0;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let data_err = |msg: &str| Error::Data {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let mut cols = line.split('\t');
            let (Some(src), Some(tgt), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(data_err("expected exactly one tab separating source and target"));
            };
            let mut map = |s: &str| -> Vec<TokenId> {
                s.split_whitespace()
                    .map(|w| {
                        vocab.id(w).unwrap_or_else(|| {
                            oov += 1;
                            UNK
                        })
                    })
                    .collect()
            };
            let source = map(src);
            let mut target = map(tgt);
            if source.is_empty() {
                return Err(data_err("empty source"));
            }
            target.push(EOS);
            pairs.push(SequencePair::new(source, target, Provenance::Data));
        }
        if oov > 0 {
            log::warn!("{}: {oov} out-of-vocabulary tokens mapped to {}", path.display(), vocab.token(UNK));
        }
        Ok((Corpus::new(pairs, split, vocab)?, oov))
    }

    /// Uniform subsample without replacement; original order is kept.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Corpus> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("subsample fraction must be in (0, 1], got {fraction}")));
        }
        let n = self.pairs.len();
        let k = ((n as f64) * fraction).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, n, k.min(n)).into_vec();
        idx.sort_unstable();
        let pairs = idx.into_iter().map(|i| self.pairs[i].clone()).collect();
        Corpus::new(pairs, self.split, self.vocab.clone())
    }
}

/// Parameters of the synthetic translation language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTaskConfig {
    pub seed: u64,
    /// Pairs shared between train and validation.
    pub n_pairs: usize,
    pub valid_fraction: f64,
    pub test_pairs: usize,
    /// Total vocabulary size including the four specials.
    pub vocab_size: usize,
    /// Inclusive source length range.
    pub len_range: (usize, usize),
    /// Mapped tokens are reversed within consecutive windows of this size.
    pub window: usize,
    /// Probability of inserting a random token after each target token.
    pub noise_rate: f64,
    pub identity_lexicon: bool,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            seed: 1,
            n_pairs: 5200,
            valid_fraction: 0.04,
            test_pairs: 300,
            vocab_size: 40,
            len_range: (3, 16),
            window: 1,
            noise_rate: 0.02,
            identity_lexicon: false,
        }
    }
}

/// Train/valid/test splits over one vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub vocab: Arc<Vocabulary>,
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

fn content_name(i: usize) -> String {
    format!("w{i:02}")
}

/// Deterministically generates the synthetic translation task.
pub fn gen_toy_translation(cfg: &ToyTaskConfig) -> Result<CorpusSplits> {
    if cfg.vocab_size <= 8 {
        return Err(Error::Config(format!("vocab_size must exceed 8, got {}", cfg.vocab_size)));
    }
    let (lo, hi) = cfg.len_range;
    if lo < 1 || hi > 120 || lo > hi {
        return Err(Error::Config(format!("len_range {:?} must lie within [1, 120]", cfg.len_range)));
    }
    if cfg.window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(Error::Config(format!("noise_rate must be in [0, 1), got {}", cfg.noise_rate)));
    }
    if !(0.0..1.0).contains(&cfg.valid_fraction) {
        return Err(Error::Config("valid_fraction must be in [0, 1)".into()));
    }
    let n_content = cfg.vocab_size - NUM_SPECIALS;
    let total = cfg.n_pairs + cfg.test_pairs;
    let distinct: f64 = (lo..=hi).map(|l| (n_content as f64).powi(l as i32)).sum();
    if (total as f64) > distinct * 0.5 {
        return Err(Error::Config(format!(
            "cannot draw {total} distinct sources from about {distinct:.0} possibilities"
        )));
    }

    let vocab = Arc::new(Vocabulary::new((0..n_content).map(content_name))?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lexicon: Vec<TokenId> = (NUM_SPECIALS..cfg.vocab_size).collect();
    if !cfg.identity_lexicon {
        lexicon.shuffle(&mut rng);
    }

    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(total);
    while pairs.len() < total {
        let len = rng.gen_range(lo..=hi);
        let source: Vec<TokenId> = (0..len).map(|_| rng.gen_range(NUM_SPECIALS..cfg.vocab_size)).collect();
        if !seen.insert(source.clone()) {
            continue;
        }
        let mapped: Vec<TokenId> = source.iter().map(|&t| lexicon[t - NUM_SPECIALS]).collect();
        let mut target = Vec::with_capacity(len + 4);
        for chunk in mapped.chunks(cfg.window) {
            for &t in chunk.iter().rev() {
                target.push(t);
                if cfg.noise_rate > 0.0 && rng.gen_bool(cfg.noise_rate) {
                    target.push(rng.gen_range(NUM_SPECIALS..cfg.vocab_size));
                }
            }
        }
        target.push(EOS);
        pairs.push(SequencePair::new(source, target, Provenance::Data));
    }

    let test = pairs.split_off(cfg.n_pairs);
    let n_valid = ((cfg.n_pairs as f64) * cfg.valid_fraction).round() as usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut is_valid = vec![false; pairs.len()];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (p, v) in pairs.into_iter().zip(is_valid) {
        if v {
            valid.push(p);
        } else {
            train.push(p);
        }
    }
    Ok(CorpusSplits {
        train: Corpus::new(train, Split::Train, vocab.clone())?,
        valid: Corpus::new(valid, Split::Valid, vocab.clone())?,
        test: Corpus::new(test, Split::Test, vocab.clone())?,
        vocab,
    })
}

/// Description of a generated corpus, written beside the splits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub task: ToyTaskConfig,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub vocab_size: usize,
    pub mean_target_len: f64,
}

impl CorpusSplits {
    pub fn manifest(&self, task: &ToyTaskConfig) -> CorpusManifest {
        CorpusManifest {
            task: task.clone(),
            train_pairs: self.train.len(),
            valid_pairs: self.valid.len(),
            test_pairs: self.test.len(),
            vocab_size: self.vocab.len(),
            mean_target_len: self.train.mean_target_len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.train.save(&dir.join("train.tsv"))?;
        self.valid.save(&dir.join("valid.tsv"))?;
        self.test.save(&dir.join("test.tsv"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Arc::new(Vocabulary::load(&dir.join("vocab.txt"))?);
        let (train, _) = Corpus::load(&dir.join("train.tsv"), vocab.clone(), Split::Train)?;
        let (valid, _) = Corpus::load(&dir.join("valid.tsv"), vocab.clone(), Split::Valid)?;
        let (test, _) = Corpus::load(&dir.join("test.tsv"), vocab.clone(), Split::Test)?;
        Ok(CorpusSplits {
            vocab,
            train,
            valid,
            test,
        })
    }
}
