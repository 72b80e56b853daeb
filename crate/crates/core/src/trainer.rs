//! Distillation training: data/teacher-corpus baselines, token-level teacher supervision
//! and the imitation variants that swap corpus targets for student generations.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Provenance, TokenId, EOS};
use crate::decoding::{beam_batch, greedy_batch, topk_batch, DecodeConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossKind};
use crate::metrics::{evaluate, sentence_bleu};
use crate::models::PolicyModel;
use crate::optim::{Adam, AdamConfig};
use crate::parallel::map_chunks;
use crate::seeds;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseVariant {
    Vanilla,
    SeqKD,
    ImitKD,
    /// Imitation on top of the teacher-generated corpus.
    ImitKDStar,
}

/// Which corpus a variant trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    Data,
    Teacher,
}

/// A row of the variant matrix: base method plus optional full-distribution loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub base: BaseVariant,
    pub full: bool,
}

impl Variant {
    pub const VANILLA: Variant = Variant::new(BaseVariant::Vanilla, false);
    pub const SEQKD: Variant = Variant::new(BaseVariant::SeqKD, false);
    pub const IMITKD: Variant = Variant::new(BaseVariant::ImitKD, false);
    pub const IMITKD_FULL: Variant = Variant::new(BaseVariant::ImitKD, true);

    pub const fn new(base: BaseVariant, full: bool) -> Self {
        Variant { base, full }
    }

    pub fn all() -> Vec<Variant> {
        let bases = [BaseVariant::Vanilla, BaseVariant::SeqKD, BaseVariant::ImitKD, BaseVariant::ImitKDStar];
        bases.iter().flat_map(|&b| [Variant::new(b, false), Variant::new(b, true)]).collect()
    }

    pub fn corpus(self) -> CorpusKind {
        match self.base {
            BaseVariant::Vanilla | BaseVariant::ImitKD => CorpusKind::Data,
            BaseVariant::SeqKD | BaseVariant::ImitKDStar => CorpusKind::Teacher,
        }
    }

    pub fn loss(self) -> LossKind {
        match (self.base, self.full) {
            (_, true) => LossKind::OracleFull,
            (BaseVariant::Vanilla | BaseVariant::SeqKD, false) => LossKind::DataNLL,
            (BaseVariant::ImitKD | BaseVariant::ImitKDStar, false) => LossKind::OracleOpt,
        }
    }

    /// Whether corpus targets may be replaced by student generations.
    pub fn replaces(self) -> bool {
        matches!(self.base, BaseVariant::ImitKD | BaseVariant::ImitKDStar)
    }

    pub fn needs_teacher(self) -> bool {
        self.loss().needs_teacher() || self.corpus() == CorpusKind::Teacher
    }

    pub fn label(self) -> String {
        let base = match self.base {
            BaseVariant::Vanilla => "Vanilla",
            BaseVariant::SeqKD => "SeqKD",
            BaseVariant::ImitKD => "ImitKD",
            BaseVariant::ImitKDStar => "ImitKD*",
        };
        if self.full {
            format!("{base}+Full")
        } else {
            base.to_string()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("wordkd") {
            return Ok(Variant::new(BaseVariant::Vanilla, true));
        }
        let (base, full) = match t.strip_suffix("+Full").or_else(|| t.strip_suffix("+full")) {
            Some(b) => (b, true),
            None => (t, false),
        };
        let base = match base.to_ascii_lowercase().as_str() {
            "vanilla" => BaseVariant::Vanilla,
            "seqkd" => BaseVariant::SeqKD,
            "imitkd" => BaseVariant::ImitKD,
            "imitkd*" => BaseVariant::ImitKDStar,
            _ => return Err(Error::Config(format!("unknown variant `{s}`"))),
        };
        Ok(Variant::new(base, full))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.label()
    }
}

/// `β_i = r^(i/I)`: the probability that example `i` keeps its corpus target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingSchedule {
    pub final_rate: f64,
    pub iterations: u64,
}

impl MixingSchedule {
    pub fn new(final_rate: f64, iterations: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&final_rate) || iterations == 0 {
            return Err(Error::Config(format!(
                "mixing schedule needs r in [0,1] and I >= 1 (got r={final_rate}, I={iterations})"
            )));
        }
        Ok(MixingSchedule { final_rate, iterations })
    }

    pub fn beta(&self, i: u64) -> f64 {
        if self.final_rate == 1.0 {
            return 1.0;
        }
        if i >= self.iterations {
            return self.final_rate;
        }
        self.final_rate.powf(i as f64 / self.iterations as f64)
    }
}

/// Draws `u ~ U[0,1)` and replaces when `u > β`.
pub fn draw_replacement<R: Rng>(rng: &mut R, beta: f64) -> (f64, bool) {
    let u: f64 = rng.gen();
    (u, u > beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplacementEvent {
    pub iteration: u64,
    /// Index into the training corpus.
    pub example: usize,
    pub replaced: bool,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Generation {
    Greedy,
    TopK { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectMetric {
    #[default]
    Bleu,
    Rouge1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    /// Pool period `M`: generations are refreshed every `M` iterations for `M·B` examples.
    pub pool_period: usize,
    /// Final mixing rate `r`.
    pub final_rate: f64,
    /// Total gradient steps `I`.
    pub iterations: u64,
    pub generation: Generation,
    pub gen_max_len: usize,
    pub valid_interval: u64,
    pub valid_max_len: usize,
    pub select_metric: SelectMetric,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::VANILLA,
            batch_size: 32,
            pool_period: 4,
            final_rate: 0.005,
            iterations: 3000,
            generation: Generation::TopK { k: 5 },
            gen_max_len: 128,
            valid_interval: 500,
            valid_max_len: 128,
            select_metric: SelectMetric::Bleu,
            optimizer: AdamConfig::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Teacher training: plain data NLL with a lower peak rate.
    pub fn teacher() -> Self {
        TrainConfig {
            variant: Variant::VANILLA,
            iterations: 2000,
            valid_interval: 250,
            optimizer: AdamConfig { base_lr: 0.005, warmup: 300, ..AdamConfig::default() },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("train.{k}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.pool_period == 0 {
            return bad("pool_period", "must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1");
        }
        if self.valid_interval == 0 {
            return bad("valid_interval", "must be at least 1");
        }
        if self.gen_max_len == 0 || self.valid_max_len == 0 {
            return bad("gen_max_len", "decode lengths must be positive");
        }
        if let Generation::TopK { k: 0 } = self.generation {
            return bad("generation.k", "must be at least 1");
        }
        MixingSchedule::new(self.final_rate, self.iterations)?;
        self.optimizer.validate()
    }
}

/// Seed for parameter initialisation under `seed`.
pub fn init_seed(seed: u64) -> u64 {
    seeds::substream(seed, "init")
}

/// Shuffled passes over `0..n`.
#[derive(Debug, Clone)]
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub iteration: u64,
    pub example: usize,
    pub u: f64,
    pub replaced: bool,
    pub beta: f64,
    /// Student generation; absent for variants that never replace.
    pub generation: Option<Vec<TokenId>>,
}

/// One labelled batch: sources by corpus index and the contexts to score.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub examples: Vec<usize>,
    pub contexts: Vec<Vec<TokenId>>,
    pub events: Vec<ReplacementEvent>,
    pub generations: Vec<Option<Vec<TokenId>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub beta: f64,
    pub replaced: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_rouge1: Option<f64>,
}

/// Receives log lines and validation checkpoints as training proceeds.
pub trait TrainSink {
    fn record(&mut self, _rec: &LogRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _iteration: u64, _student: &PolicyModel, _opt: &Adam) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;
impl TrainSink for NullSink {}

/// Writes each record as one JSON line.
pub struct NdjsonSink<W: Write>(pub W);

impl<W: Write> TrainSink for NdjsonSink<W> {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, rec)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validated parameters (the final ones without a validation corpus).
    pub student: PolicyModel,
    pub best_iteration: u64,
    pub best_metric: Option<f64>,
    pub log: Vec<LogRecord>,
    /// Iteration at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<u64>,
    pub pool_refreshes: u64,
    pub generation_secs: f64,
    pub replaced_total: usize,
}

/// Training state for one run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    schedule: MixingSchedule,
    corpus: &'a Corpus,
    teacher: Option<&'a PolicyModel>,
    student: PolicyModel,
    opt: Adam,
    sampler: EpochSampler,
    replacement: ChaCha8Rng,
    sampling: u64,
    pool: VecDeque<PoolEntry>,
    pool_refreshes: u64,
    generation_secs: f64,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, student: PolicyModel, corpus: &'a Corpus, teacher: Option<&'a PolicyModel>) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        if cfg.variant.loss().needs_teacher() && teacher.is_none() {
            return Err(Error::Config(format!("variant {} needs a teacher", cfg.variant)));
        }
        if let Some(t) = teacher {
            if t.vocab_size() != student.vocab_size() {
                return Err(Error::Config("teacher and student vocabularies differ".into()));
            }
        }
        let schedule = MixingSchedule::new(cfg.final_rate, cfg.iterations)?;
        let opt = Adam::new(cfg.optimizer.clone(), student.params())?;
        Ok(Trainer {
            schedule,
            corpus,
            teacher,
            opt,
            student,
            sampler: EpochSampler::new(corpus.len(), seeds::rng(cfg.seed, "data")),
            replacement: seeds::rng(cfg.seed, "replacement"),
            sampling: seeds::substream(cfg.seed, "sampling"),
            pool: VecDeque::new(),
            pool_refreshes: 0,
            generation_secs: 0.0,
            iteration: 0,
            cfg,
        })
    }

    pub fn student(&self) -> &PolicyModel {
        &self.student
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn pool_refreshes(&self) -> u64 {
        self.pool_refreshes
    }

    pub fn generation_secs(&self) -> f64 {
        self.generation_secs
    }

    pub fn schedule(&self) -> MixingSchedule {
        self.schedule
    }

    /// Draws the examples for iterations `i .. i+M-1` and, for replacing variants,
    /// generates from the current student for all of them.
    fn refresh_pool(&mut self, i: u64) -> Result<()> {
        let b = self.cfg.batch_size;
        let last = (i + self.cfg.pool_period as u64 - 1).min(self.cfg.iterations.max(i));
        let mut fresh = Vec::with_capacity(b * self.cfg.pool_period);
        for it in i..=last {
            let beta = self.schedule.beta(it);
            for _ in 0..b {
                let example = self.sampler.next();
                let (u, replaced) = draw_replacement(&mut self.replacement, beta);
                fresh.push(PoolEntry {
                    iteration: it,
                    example,
                    u,
                    replaced: replaced && self.cfg.variant.replaces(),
                    beta,
                    generation: None,
                });
            }
        }
        if self.cfg.variant.replaces() {
            let started = Instant::now();
            let srcs: Vec<(u64, &[TokenId])> = fresh
                .iter()
                .enumerate()
                .map(|(slot, e)| {
                    let ordinal = (i - 1) * b as u64 + slot as u64;
                    (seeds::indexed(self.sampling, ordinal), self.corpus.pairs()[e.example].source.as_slice())
                })
                .collect();
            let (student, cfg) = (&self.student, &self.cfg);
            let chunk = (fresh.len() + cfg.threads.max(1) - 1) / cfg.threads.max(1);
            let gens = map_chunks(&srcs, chunk, cfg.threads, |c| {
                let s: Vec<&[TokenId]> = c.iter().map(|x| x.1).collect();
                match cfg.generation {
                    Generation::Greedy => greedy_batch(student, &s, cfg.gen_max_len),
                    Generation::TopK { k } => {
                        let seeds: Vec<u64> = c.iter().map(|x| x.0).collect();
                        topk_batch(student, &s, k, cfg.gen_max_len, &seeds)
                    }
                }
            })?;
            for (e, h) in fresh.iter_mut().zip(gens) {
                e.generation = Some(h.tokens);
            }
            self.generation_secs += started.elapsed().as_secs_f64();
        }
        self.pool_refreshes += 1;
        self.pool.extend(fresh);
        Ok(())
    }

    /// Labelled batch for iteration `i`, refreshing the pool when `i ≡ 1 (mod M)`.
    pub fn build_batch(&mut self, i: u64) -> Result<LabeledBatch> {
        if (i - 1) % self.cfg.pool_period as u64 == 0 {
            if !self.pool.is_empty() {
                return Err(Error::Internal(format!("pool not drained at iteration {i}")));
            }
            self.refresh_pool(i)?;
        }
        let b = self.cfg.batch_size;
        if self.pool.len() < b {
            return Err(Error::Internal(format!("pool exhausted at iteration {i}")));
        }
        let mut out = LabeledBatch {
            examples: Vec::with_capacity(b),
            contexts: Vec::with_capacity(b),
            events: Vec::with_capacity(b),
            generations: Vec::with_capacity(b),
        };
        for e in self.pool.drain(..b) {
            if e.iteration != i {
                return Err(Error::Internal(format!("pool entry for iteration {} consumed at {i}", e.iteration)));
            }
            let ctx = match (&e.generation, e.replaced) {
                (Some(g), true) => g.clone(),
                (None, true) => return Err(Error::Internal("replaced example without a generation".into())),
                _ => self.corpus.pairs()[e.example].target.clone(),
            };
            out.examples.push(e.example);
            out.contexts.push(ctx);
            out.events.push(ReplacementEvent {
                iteration: i,
                example: e.example,
                replaced: e.replaced,
                beta: e.beta,
            });
            out.generations.push(e.generation);
        }
        Ok(out)
    }

    /// One iteration: batch, loss, backward, Adam update.
    pub fn step(&mut self) -> Result<LogRecord> {
        let i = self.iteration + 1;
        let batch = self.build_batch(i)?;
        let srcs: Vec<&[TokenId]> = batch.examples.iter().map(|&k| self.corpus.pairs()[k].source.as_slice()).collect();
        let ctxs: Vec<&[TokenId]> = batch.contexts.iter().map(Vec::as_slice).collect();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let rep = batch_loss(self.cfg.variant.loss(), &mut tape, &self.student, self.teacher, &srcs, &ctxs)?;
            if !rep.value.is_finite() {
                return Err(Error::Numeric { op: "training_loss" });
            }
            tape.backward(rep.total)?;
            (rep.value, tape.param_grads(self.student.params()))
        };
        let sr = self.opt.step(self.student.params_mut(), grads)?;
        self.iteration = i;
        Ok(LogRecord {
            iteration: i,
            loss,
            beta: batch.events.first().map_or(1.0, |e| e.beta),
            replaced: batch.events.iter().filter(|e| e.replaced).count(),
            lr: sr.lr,
            grad_norm: sr.grad_norm,
            valid_bleu: None,
            valid_rouge1: None,
        })
    }

    /// Runs all iterations, validating every `valid_interval` steps and at the end.
    pub fn run(mut self, valid: Option<&Corpus>, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
        let mut best: Option<(u64, f64, PolicyModel)> = None;
        let mut log = Vec::with_capacity(self.cfg.iterations as usize);
        let mut diverged_at = None;
        let mut replaced_total = 0;
        for i in 1..=self.cfg.iterations {
            let mut rec = match self.step() {
                Ok(r) => r,
                Err(Error::Numeric { op }) => {
                    log::warn!("training diverged at iteration {i} (`{op}`); keeping the last good parameters");
                    diverged_at = Some(i);
                    break;
                }
                Err(e) => return Err(e),
            };
            replaced_total += rec.replaced;
            if let Some(v) = valid {
                if i % self.cfg.valid_interval == 0 || i == self.cfg.iterations {
                    let dc = DecodeConfig::greedy(self.cfg.valid_max_len);
                    let (_, report) = evaluate(&self.student, v, &dc, 64, self.cfg.threads, 20)?;
                    rec.valid_bleu = Some(report.bleu);
                    rec.valid_rouge1 = Some(report.rouge1);
                    let metric = match self.cfg.select_metric {
                        SelectMetric::Bleu => report.bleu,
                        SelectMetric::Rouge1 => report.rouge1,
                    };
                    if best.as_ref().map_or(true, |b| metric > b.1) {
                        best = Some((i, metric, self.student.clone()));
                    }
                    sink.checkpoint(i, &self.student, &self.opt)?;
                }
            }
            sink.record(&rec)?;
            log.push(rec);
        }
        let (best_iteration, best_metric, student) = match best {
            Some((i, m, s)) => (i, Some(m), s),
            None => (self.iteration, None, self.student.clone()),
        };
        Ok(TrainOutcome {
            student,
            best_iteration,
            best_metric,
            log,
            diverged_at,
            pool_refreshes: self.pool_refreshes,
            generation_secs: self.generation_secs,
            replaced_total,
        })
    }
}

/// Convenience wrapper around [`Trainer::run`].
pub fn train(
    cfg: &TrainConfig,
    student: PolicyModel,
    corpus: &Corpus,
    teacher: Option<&PolicyModel>,
    valid: Option<&Corpus>,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    Trainer::new(cfg.clone(), student, corpus, teacher)?.run(valid, sink)
}

fn with_eos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut t = tokens.to_vec();
    if t.last() != Some(&EOS) {
        t.push(EOS);
    }
    t
}

/// Teacher K-best lists (beam search) for every source, best first.
pub fn teacher_kbest(teacher: &PolicyModel, corpus: &Corpus, k: usize, max_len: usize, threads: usize) -> Result<Vec<Vec<Hypothesis>>> {
    DecodeConfig::beam(k, max_len).validate()?;
    let srcs: Vec<&[TokenId]> = corpus.sources().collect();
    map_chunks(&srcs, 32, threads, |c| Ok(beam_batch(teacher, c, k, max_len)?.into_iter().map(|r| r.kbest).collect()))
}

/// Replaces each target by the teacher's beam output (the greedy output when that
/// scores higher), EOS-terminated. Sources and order are preserved.
pub fn build_seqkd_corpus(teacher: &PolicyModel, corpus: &Corpus, k: usize, max_len: usize, threads: usize) -> Result<Corpus> {
    DecodeConfig::beam(k, max_len).validate()?;
    let srcs: Vec<&[TokenId]> = corpus.sources().collect();
    let targets = map_chunks(&srcs, 32, threads, |c| {
        let beams = beam_batch(teacher, c, k, max_len)?;
        let greedy = greedy_batch(teacher, c, max_len)?;
        Ok(beams
            .into_iter()
            .zip(greedy)
            .map(|(b, g)| {
                let pick = if g.finished() && (!b.best.finished() || g.score > b.best.score) { g } else { b.best };
                with_eos(&pick.tokens)
            })
            .collect())
    })?;
    corpus.with_targets(targets, Provenance::Teacher)
}

/// Per source, the K-best hypothesis with the highest sentence BLEU against the data target
/// (the earlier, higher-scoring one on ties).
pub fn build_seqinter_corpus(corpus: &Corpus, kbest: &[Vec<Hypothesis>]) -> Result<Corpus> {
    if kbest.len() != corpus.len() {
        return Err(Error::Contract("one K-best list per source is required".into()));
    }
    let mut targets = Vec::with_capacity(corpus.len());
    for (n, (pair, list)) in corpus.pairs().iter().zip(kbest).enumerate() {
        let reference = pair.target_tokens();
        let mut best: Option<(f64, &Hypothesis)> = None;
        for h in list {
            let s = sentence_bleu(h.content(), reference);
            if best.map_or(true, |b| s > b.0) {
                best = Some((s, h));
            }
        }
        let (_, h) = best.ok_or_else(|| Error::Data {
            path: "<teacher beams>".into(),
            line: n + 1,
            msg: "empty beam list".into(),
        })?;
        targets.push(with_eos(&h.tokens));
    }
    corpus.with_targets(targets, Provenance::Teacher)
}

/// Fine-tunes `student` with data NLL on the SeqInter corpus for `cfg.iterations` steps.
pub fn seqinter_finetune(
    student: PolicyModel,
    kbest: &[Vec<Hypothesis>],
    corpus: &Corpus,
    cfg: &TrainConfig,
    valid: Option<&Corpus>,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    let inter = build_seqinter_corpus(corpus, kbest)?;
    let cfg = TrainConfig {
        variant: Variant::VANILLA,
        ..cfg.clone()
    };
    train(&cfg, student, &inter, None, valid, sink)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_matrix() {
        let all = Variant::all();
        assert_eq!(all.len(), 8);
        for v in &all {
            assert_eq!(v.label().parse::<Variant>().unwrap(), *v);
        }
        assert_eq!("WordKD".parse::<Variant>().unwrap(), Variant::new(BaseVariant::Vanilla, true));
        assert_eq!(Variant::VANILLA.loss(), LossKind::DataNLL);
        assert_eq!(Variant::SEQKD.loss(), LossKind::DataNLL);
        assert_eq!(Variant::SEQKD.corpus(), CorpusKind::Teacher);
        assert_eq!(Variant::IMITKD.loss(), LossKind::OracleOpt);
        assert_eq!(Variant::IMITKD_FULL.loss(), LossKind::OracleFull);
        assert_eq!(Variant::new(BaseVariant::ImitKDStar, false).corpus(), CorpusKind::Teacher);
        assert!(!Variant::VANILLA.replaces() && Variant::IMITKD.replaces());
        assert!("ImitKD**".parse::<Variant>().is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = MixingSchedule::new(0.005, 1000).unwrap();
        assert_eq!(s.beta(1000), 0.005);
        assert!((s.beta(1) - 0.005f64.powf(0.001)).abs() < 1e-15);
        assert!((1..1000).all(|i| s.beta(i + 1) < s.beta(i)));
        let one = MixingSchedule::new(1.0, 10).unwrap();
        assert!((1..=10).all(|i| one.beta(i) == 1.0));
        assert!(MixingSchedule::new(1.5, 10).is_err());
    }

    #[test]
    fn epoch_sampler_visits_everything_once_per_epoch() {
        let mut s = EpochSampler::new(7, seeds::rng(1, "data"));
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..7).map(|_| s.next()).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }
}
