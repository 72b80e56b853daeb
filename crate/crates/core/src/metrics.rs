//! BLEU, ROUGE, perplexity, length-binned BLEU and decode timing.
//!
//! Sequences are compared as given; callers strip EOS first.

use std::collections::HashMap;
use std::hash::Hash;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{strip_eos, Corpus, TokenId};
use crate::decoding::{beam_decode, decode_corpus, greedy_decode, DecodeConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::losses::nll_loss;
use crate::models::PolicyModel;
use crate::tensor::Tape;

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate count for order `n`.
fn clipped<T: Hash + Eq>(hyp: &[T], refr: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(refr, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn brevity(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// Geometric mean over the orders that have at least one candidate n-gram.
fn combine(stats: &[(usize, usize)], smooth_from: usize) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for (i, &(m, c)) in stats.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let p = if i + 1 >= smooth_from {
            (m as f64 + 1.0) / (c as f64 + 1.0)
        } else {
            m as f64 / c as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    (log_sum / orders as f64).exp()
}

/// Unsmoothed corpus BLEU on the 0–100 scale.
pub fn corpus_bleu<T, S>(hyps: &[S], refs: &[S], max_n: usize) -> Result<f64>
where
    T: Hash + Eq,
    S: AsRef<[T]>,
{
    if hyps.is_empty() || hyps.len() != refs.len() || max_n == 0 {
        return Err(Error::Contract(format!(
            "corpus_bleu needs equal nonempty lists ({} hypotheses, {} references)",
            hyps.len(),
            refs.len()
        )));
    }
    let mut stats = vec![(0usize, 0usize); max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for (n, s) in stats.iter_mut().enumerate() {
            let (m, k) = clipped(h, rf, n + 1);
            s.0 += m;
            s.1 += k;
        }
    }
    Ok(100.0 * brevity(c, r) * combine(&stats, usize::MAX))
}

/// Single-pair BLEU with add-one smoothing on orders two and up.
pub fn sentence_bleu<T: Hash + Eq>(hyp: &[T], refr: &[T]) -> f64 {
    let stats: Vec<_> = (1..=4).map(|n| clipped(hyp, refr, n)).collect();
    100.0 * brevity(hyp.len(), refr.len()) * combine(&stats, 2)
}

fn f1(matched: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if matched == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = matched as f64 / hyp_total as f64;
    let r = matched as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rouge {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

/// ROUGE-1/2/L F1 for one pair. Identical sequences score 1 even when too short for bigrams.
pub fn rouge_scores<T: Hash + Eq>(hyp: &[T], refr: &[T]) -> Rouge {
    if !hyp.is_empty() && hyp == refr {
        return Rouge {
            rouge1: 1.0,
            rouge2: 1.0,
            rouge_l: 1.0,
        };
    }
    let overlap = |n: usize| {
        let (m, c) = clipped(hyp, refr, n);
        f1(m, c, refr.len().saturating_sub(n - 1))
    };
    Rouge {
        rouge1: overlap(1),
        rouge2: overlap(2),
        rouge_l: f1(lcs(hyp, refr), hyp.len(), refr.len()),
    }
}

/// Mean of per-pair scores.
pub fn corpus_rouge<T, S>(hyps: &[S], refs: &[S]) -> Result<Rouge>
where
    T: Hash + Eq,
    S: AsRef<[T]>,
{
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Contract("corpus_rouge needs equal nonempty lists".into()));
    }
    let mut acc = Rouge::default();
    for (h, r) in hyps.iter().zip(refs) {
        let s = rouge_scores(h.as_ref(), r.as_ref());
        acc.rouge1 += s.rouge1;
        acc.rouge2 += s.rouge2;
        acc.rouge_l += s.rouge_l;
    }
    let n = hyps.len() as f64;
    Ok(Rouge {
        rouge1: acc.rouge1 / n,
        rouge2: acc.rouge2 / n,
        rouge_l: acc.rouge_l / n,
    })
}

/// `exp` of the token-mean teacher-forced NLL, EOS included.
pub fn perplexity(model: &PolicyModel, corpus: &Corpus, batch: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("perplexity of an empty corpus".into()));
    }
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in corpus.pairs().chunks(batch.max(1)) {
        let srcs: Vec<&[TokenId]> = chunk.iter().map(|p| p.source.as_slice()).collect();
        let tgts: Vec<&[TokenId]> = chunk.iter().map(|p| p.target.as_slice()).collect();
        let mut tape = Tape::no_grad();
        let r = nll_loss(&mut tape, model, &srcs, &tgts)?;
        total += r.per_sequence.iter().sum::<f64>();
        tokens += r.tokens;
    }
    Ok((total / tokens as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    /// Inclusive hypothesis-length bounds.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
}

/// Corpus BLEU per hypothesis-length bin `[0,w], [w+1,2w], ...`; lengths past `max_len`
/// fall in the last bin and empty bins are omitted.
pub fn length_binned_bleu<S: AsRef<[TokenId]>>(hyps: &[S], refs: &[S], bin_width: usize, max_len: usize) -> Result<Vec<LengthBin>> {
    if bin_width == 0 || hyps.len() != refs.len() {
        return Err(Error::Contract("length_binned_bleu needs a positive width and equal lists".into()));
    }
    let nbins = max_len.saturating_sub(1) / bin_width + 1;
    let mut groups: Vec<(Vec<&[TokenId]>, Vec<&[TokenId]>)> = vec![(vec![], vec![]); nbins];
    for (h, r) in hyps.iter().zip(refs) {
        let b = (h.as_ref().len().saturating_sub(1) / bin_width).min(nbins - 1);
        groups[b].0.push(h.as_ref());
        groups[b].1.push(r.as_ref());
    }
    let mut out = Vec::new();
    for (b, (hs, rs)) in groups.into_iter().enumerate() {
        if hs.is_empty() {
            continue;
        }
        out.push(LengthBin {
            lo: if b == 0 { 0 } else { b * bin_width + 1 },
            hi: (b + 1) * bin_width,
            count: hs.len(),
            bleu: corpus_bleu(&hs, &rs, 4)?,
        });
    }
    Ok(out)
}

/// First-bin BLEU minus last-populated-bin BLEU.
pub fn bin_drop(bins: &[LengthBin]) -> Option<f64> {
    match (bins.first(), bins.last()) {
        (Some(a), Some(b)) if bins.len() >= 2 => Some(a.bleu - b.bleu),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTiming {
    pub beam: usize,
    pub mean_ms_per_sequence: f64,
}

/// Median over `passes` of the mean per-sequence wall-clock, after one untimed warmup pass.
/// `K = 1` runs greedy decoding.
pub fn bench_decode(model: &PolicyModel, sources: &[&[TokenId]], beam: usize, max_len: usize, passes: usize) -> Result<DecodeTiming> {
    if sources.is_empty() || beam == 0 {
        return Err(Error::Contract("bench_decode needs sources and a positive beam".into()));
    }
    let run = || -> Result<()> {
        for s in sources {
            if beam == 1 {
                greedy_decode(model, s, &DecodeConfig::greedy(max_len))?;
            } else {
                beam_decode(model, s, &DecodeConfig::beam(beam, max_len))?;
            }
        }
        Ok(())
    };
    run()?;
    let mut means = Vec::with_capacity(passes.max(3));
    for _ in 0..passes.max(3) {
        let t = Instant::now();
        run()?;
        means.push(t.elapsed().as_secs_f64() * 1e3 / sources.len() as f64);
    }
    means.sort_by(f64::total_cmp);
    Ok(DecodeTiming {
        beam,
        mean_ms_per_sequence: means[means.len() / 2],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedComparison {
    pub beam: usize,
    pub student_ms: f64,
    pub teacher_ms: f64,
    /// Teacher time over student time.
    pub ratio: f64,
    pub student_params: usize,
    pub teacher_params: usize,
}

/// Per-sequence timing of both models at each beam size.
pub fn compare_speed(
    student: &PolicyModel,
    teacher: &PolicyModel,
    sources: &[&[TokenId]],
    beams: &[usize],
    max_len: usize,
    passes: usize,
) -> Result<Vec<SpeedComparison>> {
    beams
        .iter()
        .map(|&k| {
            let s = bench_decode(student, sources, k, max_len, passes)?;
            let t = bench_decode(teacher, sources, k, max_len, passes)?;
            Ok(SpeedComparison {
                beam: k,
                student_ms: s.mean_ms_per_sequence,
                teacher_ms: t.mean_ms_per_sequence,
                ratio: t.mean_ms_per_sequence / s.mean_ms_per_sequence,
                student_params: student.num_params(),
                teacher_params: teacher.num_params(),
            })
        })
        .collect()
}

/// Evaluation summary; fields serialize in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub bins: Vec<LengthBin>,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub perplexity: Option<f64>,
    pub hypotheses: usize,
    pub references: usize,
    pub timing: Vec<DecodeTiming>,
}

impl MetricsReport {
    /// Scores hypotheses against references (EOS is stripped from both).
    pub fn score<S: AsRef<[TokenId]>>(hyps: &[S], refs: &[S], bin_width: usize, max_len: usize) -> Result<Self> {
        let h: Vec<&[TokenId]> = hyps.iter().map(|s| strip_eos(s.as_ref())).collect();
        let r: Vec<&[TokenId]> = refs.iter().map(|s| strip_eos(s.as_ref())).collect();
        let rouge = corpus_rouge(&h, &r)?;
        Ok(MetricsReport {
            bleu: corpus_bleu(&h, &r, 4)?,
            bins: length_binned_bleu(&h, &r, bin_width, max_len)?,
            rouge1: rouge.rouge1,
            rouge2: rouge.rouge2,
            rouge_l: rouge.rouge_l,
            perplexity: None,
            hypotheses: h.len(),
            references: r.len(),
            timing: vec![],
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn csv_header() -> &'static str {
        "bleu,rouge1,rouge2,rouge_l,perplexity,hypotheses,references,bins"
    }

    /// One flat row; bins are `lo-hi:count:bleu` joined by `;`.
    pub fn csv_row(&self) -> String {
        let bins: Vec<String> = self.bins.iter().map(|b| format!("{}-{}:{}:{}", b.lo, b.hi, b.count, b.bleu)).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.bleu,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.perplexity.map(|p| p.to_string()).unwrap_or_default(),
            self.hypotheses,
            self.references,
            bins.join(";")
        )
    }
}

/// Decodes `corpus` sources and scores them against its targets.
pub fn evaluate(
    model: &PolicyModel,
    corpus: &Corpus,
    cfg: &DecodeConfig,
    batch: usize,
    threads: usize,
    bin_width: usize,
) -> Result<(Vec<Hypothesis>, MetricsReport)> {
    let srcs: Vec<&[TokenId]> = corpus.sources().collect();
    let hyps = decode_corpus(model, &srcs, cfg, batch, threads)?;
    let h: Vec<&[TokenId]> = hyps.iter().map(|h| h.tokens.as_slice()).collect();
    let r: Vec<&[TokenId]> = corpus.pairs().iter().map(|p| p.target.as_slice()).collect();
    let report = MetricsReport::score(&h, &r, bin_width, cfg.max_len.max(bin_width))?;
    Ok((hyps, report))
}
