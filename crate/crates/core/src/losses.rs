//! Token-level training objectives: data NLL, the oracle's optimal next token,
//! and full teacher-student cross-entropy.
//!
//! All losses are means over non-PAD positions. A context `y` of length `n`
//! contributes the `n` prefixes `y_<1 .. y_<n`, one per token of `y`.

use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::models::PolicyModel;
use crate::tensor::{log_softmax_rows, softmax_rows, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    DataNLL,
    OracleOpt,
    OracleFull,
}

impl LossKind {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, LossKind::DataNLL)
    }
}

/// Loss of one batch on the student's tape.
#[derive(Debug, Clone)]
pub struct BatchLossReport {
    /// Scalar token-mean loss.
    pub total: Var,
    pub value: f64,
    pub tokens: usize,
    /// Summed token losses of each sequence.
    pub per_sequence: Vec<f64>,
}

/// What each scored position is trained towards.
#[derive(Debug, Clone, Copy)]
pub enum TokenTargets<'a> {
    /// One token id per position.
    Tokens(&'a [TokenId]),
    /// One `[vocab]` probability row per position, flattened.
    Distributions(&'a [f64]),
}

/// Mean cross-entropy of `logits` rows `rows` against `targets`.
///
/// Returns the scalar loss and the per-position losses.
pub fn token_cross_entropy(tape: &mut Tape<'_>, logits: Var, rows: &[usize], targets: TokenTargets<'_>) -> Result<(Var, Vec<f64>)> {
    if rows.is_empty() {
        return Err(Error::Contract("loss over zero positions".into()));
    }
    let v = *tape.shape(logits).last().unwrap_or(&0);
    let picked = tape.gather_rows(logits, rows)?;
    let lp = tape.log_softmax(picked)?;
    let n = rows.len();
    let (sum, per) = match targets {
        TokenTargets::Tokens(ids) => {
            if ids.len() != n {
                return Err(Error::Contract(format!("{} targets for {n} positions", ids.len())));
            }
            let chosen = tape.take_last(lp, ids)?;
            let per = tape.value(chosen).iter().map(|x| -x).collect();
            (tape.sum(chosen)?, per)
        }
        TokenTargets::Distributions(probs) => {
            if probs.len() != n * v {
                return Err(Error::Contract(format!("{} target probabilities for {n}x{v} positions", probs.len())));
            }
            let p = tape.constant_data(vec![n, v], probs.to_vec())?;
            let weighted = tape.mul(lp, p)?;
            let per = tape.value(weighted).chunks(v).map(|r| -r.iter().sum::<f64>()).collect();
            (tape.sum(weighted)?, per)
        }
    };
    let mean = tape.scale(sum, -1.0 / n as f64)?;
    Ok((mean, per))
}

/// Row indices and slots of every scored position of a padded forward pass.
fn positions(contexts: &[&[TokenId]], max_len: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (b, c) in contexts.iter().enumerate() {
        for (t, &tok) in c.iter().enumerate() {
            if tok != PAD {
                out.push((b, t, b * max_len + t));
            }
        }
    }
    out
}

fn check_batch(sources: &[&[TokenId]], contexts: &[&[TokenId]]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if sources.len() != contexts.len() {
        return Err(Error::Contract(format!("{} sources but {} contexts", sources.len(), contexts.len())));
    }
    Ok(())
}

fn report(total: Var, tape: &Tape<'_>, pos: &[(usize, usize, usize)], per_token: &[f64], batch: usize) -> BatchLossReport {
    let mut per_sequence = vec![0.0; batch];
    for (&(b, _, _), l) in pos.iter().zip(per_token) {
        per_sequence[b] += l;
    }
    BatchLossReport {
        total,
        value: tape.value(total)[0],
        tokens: pos.len(),
        per_sequence,
    }
}

/// `-log π(y_t | y_<t, x)` averaged over target tokens; targets must end with EOS.
pub fn nll_loss<'p>(
    tape: &mut Tape<'p>,
    student: &'p PolicyModel,
    sources: &[&[TokenId]],
    targets: &[&[TokenId]],
) -> Result<BatchLossReport> {
    check_batch(sources, targets)?;
    if let Some(bad) = targets.iter().position(|t| t.last() != Some(&EOS)) {
        return Err(Error::Contract(format!("target {bad} does not end with EOS")));
    }
    let fl = student.forward(tape, sources, targets)?;
    let pos = positions(targets, fl.max_len);
    let rows: Vec<usize> = pos.iter().map(|p| p.2).collect();
    let ids: Vec<TokenId> = pos.iter().map(|&(b, t, _)| targets[b][t]).collect();
    let (total, per) = token_cross_entropy(tape, fl.logits, &rows, TokenTargets::Tokens(&ids))?;
    Ok(report(total, tape, &pos, &per, sources.len()))
}

/// Teacher log-probabilities at every scored position, `[positions, vocab]`.
pub fn teacher_log_probs(teacher: &PolicyModel, sources: &[&[TokenId]], contexts: &[&[TokenId]]) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let fl = teacher.forward(&mut tape, sources, contexts)?;
    let v = teacher.vocab_size();
    let logits = tape.value(fl.logits);
    let pos = positions(contexts, fl.max_len);
    let mut rows = Vec::with_capacity(pos.len() * v);
    for &(_, _, r) in &pos {
        rows.extend_from_slice(&logits[r * v..(r + 1) * v]);
    }
    Ok(log_softmax_rows(&rows, v))
}

/// Teacher's best emittable token, lowest id on ties.
fn oracle_token(lp: &[f64]) -> TokenId {
    let mut best = EOS;
    for (tok, &v) in lp.iter().enumerate() {
        if tok != PAD && tok != BOS && v > lp[best] {
            best = tok;
        }
    }
    best
}

fn check_vocab(student: &PolicyModel, teacher: &PolicyModel) -> Result<()> {
    if student.vocab_size() != teacher.vocab_size() {
        return Err(Error::Config(format!(
            "student vocabulary {} differs from teacher vocabulary {}",
            student.vocab_size(),
            teacher.vocab_size()
        )));
    }
    Ok(())
}

/// `-log π(v* | y_<t, x)` with `v*` the teacher's argmax at each prefix of each context.
pub fn oracle_opt_loss<'p>(
    tape: &mut Tape<'p>,
    student: &'p PolicyModel,
    teacher: &PolicyModel,
    sources: &[&[TokenId]],
    contexts: &[&[TokenId]],
) -> Result<BatchLossReport> {
    oracle_loss(tape, student, teacher, sources, contexts, false)
}

/// `-Σ_v π*(v | y_<t, x) log π(v | y_<t, x)` at each prefix of each context.
pub fn oracle_full_loss<'p>(
    tape: &mut Tape<'p>,
    student: &'p PolicyModel,
    teacher: &PolicyModel,
    sources: &[&[TokenId]],
    contexts: &[&[TokenId]],
) -> Result<BatchLossReport> {
    oracle_loss(tape, student, teacher, sources, contexts, true)
}

fn oracle_loss<'p>(
    tape: &mut Tape<'p>,
    student: &'p PolicyModel,
    teacher: &PolicyModel,
    sources: &[&[TokenId]],
    contexts: &[&[TokenId]],
    full: bool,
) -> Result<BatchLossReport> {
    check_batch(sources, contexts)?;
    check_vocab(student, teacher)?;
    let v = student.vocab_size();
    let tlp = teacher_log_probs(teacher, sources, contexts)?;
    let fl = student.forward(tape, sources, contexts)?;
    let pos = positions(contexts, fl.max_len);
    let rows: Vec<usize> = pos.iter().map(|p| p.2).collect();
    let (total, per) = if full {
        let probs = softmax_rows(&tlp, v);
        token_cross_entropy(tape, fl.logits, &rows, TokenTargets::Distributions(&probs))?
    } else {
        let ids: Vec<TokenId> = tlp.chunks(v).map(oracle_token).collect();
        token_cross_entropy(tape, fl.logits, &rows, TokenTargets::Tokens(&ids))?
    };
    Ok(report(total, tape, &pos, &per, sources.len()))
}

/// Dispatches on `kind`; oracle kinds require `teacher`.
pub fn batch_loss<'p>(
    kind: LossKind,
    tape: &mut Tape<'p>,
    student: &'p PolicyModel,
    teacher: Option<&PolicyModel>,
    sources: &[&[TokenId]],
    contexts: &[&[TokenId]],
) -> Result<BatchLossReport> {
    match (kind, teacher) {
        (LossKind::DataNLL, _) => nll_loss(tape, student, sources, contexts),
        (LossKind::OracleOpt, Some(t)) => oracle_opt_loss(tape, student, t, sources, contexts),
        (LossKind::OracleFull, Some(t)) => oracle_full_loss(tape, student, t, sources, contexts),
        (_, None) => Err(Error::Contract(format!("{kind:?} needs a teacher"))),
    }
}

/// Mean per-position entropy of the teacher over the scored positions.
pub fn teacher_entropy(teacher: &PolicyModel, sources: &[&[TokenId]], contexts: &[&[TokenId]]) -> Result<f64> {
    let v = teacher.vocab_size();
    let tlp = teacher_log_probs(teacher, sources, contexts)?;
    let rows = tlp.len() / v;
    let h: f64 = tlp
        .chunks(v)
        .map(|r| -r.iter().map(|&l| l.exp() * l).sum::<f64>())
        .sum();
    Ok(h / rows as f64)
}
