//! Greedy, top-K sampling, beam search and student-then-teacher decoding.
//!
//! PAD and BOS are never emitted. Hypothesis scores use the unmasked
//! log-probabilities, so they agree with [`PolicyModel::sequence_logprob`].

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{strip_eos, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::models::{DecoderState, EncodedBatch, PolicyModel};
use crate::tensor::log_softmax_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    TopK,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Beam size or sampling K.
    #[serde(default = "one")]
    pub k: usize,
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            k: 1,
            max_len,
            seed: 0,
        }
    }

    pub fn beam(k: usize, max_len: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            k,
            max_len,
            seed: 0,
        }
    }

    pub fn topk(k: usize, max_len: usize, seed: u64) -> Self {
        DecodeConfig {
            strategy: Strategy::TopK,
            k,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_len == 0 {
            return Err(Error::Config(format!(
                "decode needs k >= 1 and max_len >= 1, got k={} max_len={}",
                self.k, self.max_len
            )));
        }
        Ok(())
    }
}

/// A generated sequence; `tokens` ends with EOS unless cut at `max_len`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
}

impl Hypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        strip_eos(&self.tokens)
    }
}

/// Beam output: the chosen hypothesis and the final K-best list, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    pub kbest: Vec<Hypothesis>,
}

fn emittable(tok: TokenId) -> bool {
    tok != PAD && tok != BOS
}

/// Highest-scoring emittable token, lowest id on ties.
fn argmax_allowed(lp: &[f64]) -> TokenId {
    let mut best = None;
    for (tok, &v) in lp.iter().enumerate() {
        if !emittable(tok) {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((tok, v)),
        }
    }
    best.map(|b| b.0).unwrap_or(EOS)
}

/// One in-flight hypothesis per decoder row.
struct Rows {
    hyps: Vec<Hypothesis>,
    /// Output slot of each live row.
    slot: Vec<usize>,
    /// Token each live row feeds next.
    pending: Vec<TokenId>,
    state: DecoderState,
}

/// Runs rows forward, choosing each next token with `pick(slot, log_probs)`,
/// until every row emits EOS or reaches `max_len` tokens.
fn run_rows<F>(model: &PolicyModel, enc: &EncodedBatch, mut rows: Rows, max_len: usize, out: &mut [Option<Hypothesis>], mut pick: F) -> Result<()>
where
    F: FnMut(usize, &[f64]) -> TokenId,
{
    let v = model.vocab_size();
    // rows already at the limit never step
    retire(&mut rows, max_len, out);
    while !rows.slot.is_empty() {
        let (logits, state) = model.step(enc, &rows.state, &rows.pending)?;
        rows.state = state;
        let lp = log_softmax_rows(&logits, v);
        for (r, row_lp) in lp.chunks(v).enumerate() {
            let tok = pick(rows.slot[r], row_lp);
            rows.hyps[r].tokens.push(tok);
            rows.hyps[r].score += row_lp[tok];
            rows.pending[r] = tok;
        }
        retire(&mut rows, max_len, out);
    }
    Ok(())
}

fn retire(rows: &mut Rows, max_len: usize, out: &mut [Option<Hypothesis>]) {
    let mut keep = Vec::with_capacity(rows.hyps.len());
    for (r, h) in rows.hyps.iter_mut().enumerate() {
        if h.finished() || h.tokens.len() >= max_len {
            out[rows.slot[r]] = Some(std::mem::take(h));
        } else {
            keep.push(r);
        }
    }
    if keep.len() == rows.hyps.len() {
        return;
    }
    rows.state = rows.state.select(&keep);
    rows.hyps = keep.iter().map(|&r| std::mem::take(&mut rows.hyps[r])).collect();
    rows.slot = keep.iter().map(|&r| rows.slot[r]).collect();
    rows.pending = keep.iter().map(|&r| rows.pending[r]).collect();
}

fn fresh_rows(model: &PolicyModel, enc: &EncodedBatch) -> Result<Rows> {
    let n = enc.batch();
    Ok(Rows {
        hyps: vec![Hypothesis::default(); n],
        slot: (0..n).collect(),
        pending: vec![BOS; n],
        state: model.start(enc, &(0..n).collect::<Vec<_>>())?,
    })
}

fn collect(out: Vec<Option<Hypothesis>>) -> Result<Vec<Hypothesis>> {
    out.into_iter()
        .map(|h| h.ok_or_else(|| Error::Internal("decoder left a row unfinished".into())))
        .collect()
}

/// Greedy decoding of a batch of sources.
pub fn greedy_batch(model: &PolicyModel, sources: &[&[TokenId]], max_len: usize) -> Result<Vec<Hypothesis>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let enc = model.encode(sources)?;
    let mut out = vec![None; sources.len()];
    run_rows(model, &enc, fresh_rows(model, &enc)?, max_len, &mut out, |_, lp| argmax_allowed(lp))?;
    collect(out)
}

pub fn greedy_decode(model: &PolicyModel, source: &[TokenId], cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    Ok(greedy_batch(model, &[source], cfg.max_len)?.remove(0))
}

/// Draws from the renormalised `k` most probable emittable tokens.
fn sample_topk(lp: &[f64], k: usize, rng: &mut ChaCha8Rng) -> TokenId {
    let dist = topk_distribution(lp, k);
    let mut u = rng.gen::<f64>();
    for &(tok, p) in &dist {
        if u < p {
            return tok;
        }
        u -= p;
    }
    dist[dist.len() - 1].0
}

/// Renormalised top-K distribution over emittable tokens, as `(token, prob)`.
pub fn topk_distribution(lp: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut cand: Vec<TokenId> = (0..lp.len()).filter(|&t| emittable(t)).collect();
    cand.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    cand.truncate(k);
    let top = lp[cand[0]];
    let weights: Vec<f64> = cand.iter().map(|&t| (lp[t] - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    cand.into_iter().zip(weights).map(|(t, w)| (t, w / total)).collect()
}

fn clamp_k(k: usize, vocab: usize) -> usize {
    let effective = vocab.saturating_sub(2).max(1);
    if k > effective {
        log::warn!("top-k K={k} exceeds the {effective} emittable tokens; clamping");
        effective
    } else {
        k
    }
}

/// Top-K sampling with one seed per source.
pub fn topk_batch(model: &PolicyModel, sources: &[&[TokenId]], k: usize, max_len: usize, seeds: &[u64]) -> Result<Vec<Hypothesis>> {
    if k == 0 || max_len == 0 {
        return Err(Error::Config("top-k sampling needs k >= 1 and max_len >= 1".into()));
    }
    if seeds.len() != sources.len() {
        return Err(Error::Contract("one seed per source required".into()));
    }
    let k = clamp_k(k, model.vocab_size());
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let enc = model.encode(sources)?;
    let mut out = vec![None; sources.len()];
    run_rows(model, &enc, fresh_rows(model, &enc)?, max_len, &mut out, |slot, lp| {
        sample_topk(lp, k, &mut rngs[slot])
    })?;
    collect(out)
}

pub fn topk_sample(model: &PolicyModel, source: &[TokenId], cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    Ok(topk_batch(model, &[source], cfg.k, cfg.max_len, &[cfg.seed])?.remove(0))
}

struct BeamSearch {
    live: Vec<Hypothesis>,
    finished: Vec<Hypothesis>,
    done: bool,
}

fn by_score_desc(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Beam search over summed log-probabilities without length normalisation.
///
/// Each step keeps the K best one-token extensions of the live beam; those
/// ending in EOS retire as finished. A source stops once its best finished
/// score is at least its best live score, since scores never increase.
pub fn beam_batch(model: &PolicyModel, sources: &[&[TokenId]], k: usize, max_len: usize) -> Result<Vec<BeamResult>> {
    if k == 0 || max_len == 0 {
        return Err(Error::Config("beam search needs k >= 1 and max_len >= 1".into()));
    }
    let v = model.vocab_size();
    let enc = model.encode(sources)?;
    let mut searches: Vec<BeamSearch> = sources
        .iter()
        .map(|_| BeamSearch {
            live: vec![Hypothesis {
                tokens: Vec::new(),
                score: 0.0,
            }],
            finished: Vec::new(),
            done: false,
        })
        .collect();
    let mut state = model.start(&enc, &(0..sources.len()).collect::<Vec<_>>())?;
    let mut pending = vec![BOS; sources.len()];
    // (search, live index) for every decoder row
    let mut owners: Vec<(usize, usize)> = (0..sources.len()).map(|s| (s, 0)).collect();

    for t in 0..max_len {
        if owners.is_empty() {
            break;
        }
        let (logits, next) = model.step(&enc, &state, &pending)?;
        let lp = log_softmax_rows(&logits, v);
        let mut new_owners = Vec::new();
        let mut parents = Vec::new();
        let mut new_pending = Vec::new();
        let mut row = 0;
        while row < owners.len() {
            let s = owners[row].0;
            let first = row;
            while row < owners.len() && owners[row].0 == s {
                row += 1;
            }
            // candidates (score, parent row, token); ties prefer earlier parents and lower ids
            let mut cand: Vec<(f64, usize, TokenId)> = Vec::with_capacity((row - first) * v);
            for r in first..row {
                let base = searches[s].live[owners[r].1].score;
                for tok in (0..v).filter(|&tok| emittable(tok)) {
                    cand.push((base + lp[r * v + tok], r, tok));
                }
            }
            cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cand.truncate(k);
            let search = &mut searches[s];
            let mut live = Vec::new();
            for (score, r, tok) in cand {
                let mut tokens = search.live[owners[r].1].tokens.clone();
                tokens.push(tok);
                let h = Hypothesis { tokens, score };
                if tok == EOS {
                    search.finished.push(h);
                } else {
                    parents.push(r);
                    new_pending.push(tok);
                    new_owners.push((s, live.len()));
                    live.push(h);
                }
            }
            search.live = live;
            let best_fin = search.finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = search.live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if search.live.is_empty() || best_fin >= best_live || t + 1 == max_len {
                search.done = true;
            }
        }
        // drop rows of searches that just finished
        let keep: Vec<usize> = (0..new_owners.len()).filter(|&i| !searches[new_owners[i].0].done).collect();
        let rows: Vec<usize> = keep.iter().map(|&i| parents[i]).collect();
        state = next.select(&rows);
        pending = keep.iter().map(|&i| new_pending[i]).collect();
        owners = keep.iter().map(|&i| new_owners[i]).collect();
    }

    Ok(searches
        .into_iter()
        .map(|s| {
            let mut finished = s.finished;
            finished.sort_by(by_score_desc);
            let mut live = s.live;
            live.sort_by(by_score_desc);
            let best = finished
                .first()
                .or(live.first())
                .cloned()
                .unwrap_or(Hypothesis {
                    tokens: Vec::new(),
                    score: 0.0,
                });
            let mut kbest: Vec<Hypothesis> = finished.into_iter().chain(live).collect();
            kbest.sort_by(by_score_desc);
            kbest.truncate(k);
            BeamResult { best, kbest }
        })
        .collect())
}

pub fn beam_decode(model: &PolicyModel, source: &[TokenId], cfg: &DecodeConfig) -> Result<BeamResult> {
    cfg.validate()?;
    Ok(beam_batch(model, &[source], cfg.k, cfg.max_len)?.remove(0))
}

/// Dispatches on `cfg.strategy`; returns the single best hypothesis.
pub fn decode(model: &PolicyModel, source: &[TokenId], cfg: &DecodeConfig) -> Result<Hypothesis> {
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(model, source, cfg),
        Strategy::TopK => topk_sample(model, source, cfg),
        Strategy::Beam => Ok(beam_decode(model, source, cfg)?.best),
    }
}

/// Batched [`decode`]; sampling uses seed `cfg.seed + i` for source `i`.
pub fn decode_batch(model: &PolicyModel, sources: &[&[TokenId]], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy_batch(model, sources, cfg.max_len),
        Strategy::TopK => {
            let seeds: Vec<u64> = (0..sources.len() as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
            topk_batch(model, sources, cfg.k, cfg.max_len, &seeds)
        }
        Strategy::Beam => Ok(beam_batch(model, sources, cfg.k, cfg.max_len)?.into_iter().map(|b| b.best).collect()),
    }
}

/// [`decode_batch`] over a whole source list in chunks of `batch`, optionally on several
/// threads. Sampling seeds are `cfg.seed + i` with `i` the global source index, so the
/// output does not depend on `batch` or `threads`.
pub fn decode_corpus(model: &PolicyModel, sources: &[&[TokenId]], cfg: &DecodeConfig, batch: usize, threads: usize) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let indexed: Vec<(u64, &[TokenId])> = sources.iter().enumerate().map(|(i, s)| (i as u64, *s)).collect();
    crate::parallel::map_chunks(&indexed, batch, threads, |chunk| {
        let srcs: Vec<&[TokenId]> = chunk.iter().map(|c| c.1).collect();
        match cfg.strategy {
            Strategy::TopK => {
                let seeds: Vec<u64> = chunk.iter().map(|c| cfg.seed.wrapping_add(c.0)).collect();
                topk_batch(model, &srcs, cfg.k, cfg.max_len, &seeds)
            }
            _ => decode_batch(model, &srcs, cfg),
        }
    })
}

/// Student greedy for `switch_step` tokens, then teacher greedy from that prefix.
///
/// A student EOS before the switch ends the hypothesis. The score sums each
/// token's log-probability under the model that emitted it.
pub fn mixed_batch(
    student: &PolicyModel,
    teacher: &PolicyModel,
    sources: &[&[TokenId]],
    switch_step: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if student.vocab_size() != teacher.vocab_size() {
        return Err(Error::Config(format!(
            "student vocabulary {} differs from teacher vocabulary {}",
            student.vocab_size(),
            teacher.vocab_size()
        )));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let prefix_len = switch_step.min(max_len);
    let prefixes = if prefix_len == 0 {
        sources
            .iter()
            .map(|_| Hypothesis {
                tokens: Vec::new(),
                score: 0.0,
            })
            .collect()
    } else {
        greedy_batch(student, sources, prefix_len)?
    };
    let cont: Vec<usize> = (0..sources.len())
        .filter(|&i| !prefixes[i].finished() && prefixes[i].tokens.len() < max_len)
        .collect();
    let mut out: Vec<Option<Hypothesis>> = prefixes.iter().map(|h| Some(h.clone())).collect();
    if cont.is_empty() {
        return collect(out);
    }
    let cont_src: Vec<&[TokenId]> = cont.iter().map(|&i| sources[i]).collect();
    let enc = teacher.encode(&cont_src)?;
    let mut state = teacher.start(&enc, &(0..cont.len()).collect::<Vec<_>>())?;
    // feed BOS and all but the last prefix token; the last one is fed by the loop
    for t in 0..prefix_len {
        let toks: Vec<TokenId> = cont
            .iter()
            .map(|&i| if t == 0 { BOS } else { prefixes[i].tokens[t - 1] })
            .collect();
        state = teacher.step(&enc, &state, &toks)?.1;
    }
    let pending = cont
        .iter()
        .map(|&i| prefixes[i].tokens.last().copied().unwrap_or(BOS))
        .collect();
    let rows = Rows {
        hyps: cont.iter().map(|&i| prefixes[i].clone()).collect(),
        slot: (0..cont.len()).collect(),
        pending,
        state,
    };
    let mut tail = vec![None; cont.len()];
    run_rows(teacher, &enc, rows, max_len, &mut tail, |_, lp| argmax_allowed(lp))?;
    for (j, h) in tail.into_iter().enumerate() {
        out[cont[j]] = h;
    }
    collect(out)
}

pub fn mixed_decode(
    student: &PolicyModel,
    teacher: &PolicyModel,
    source: &[TokenId],
    switch_step: usize,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    Ok(mixed_batch(student, teacher, &[source], switch_step, cfg.max_len)?.remove(0))
}
