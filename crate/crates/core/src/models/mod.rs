//! Encoder-decoder policies `π(y_t | y_<t, x)`.
//!
//! Both architectures expose the same batched surface:
//!
//! * [`PolicyModel::forward`] runs teacher-forced over padded contexts on a
//!   tape (for training and for scoring whole sequences);
//! * [`PolicyModel::encode`], [`PolicyModel::start`] and [`PolicyModel::step`]
//!   run incremental decoding from a cached [`DecoderState`].

mod recurrent;
mod transformer;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, ParamSet, Tape, Tensor, Var};

/// Masked attention scores use this instead of `-inf` to stay finite.
pub(crate) const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Recurrent,
    Transformer,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::Recurrent => "recurrent",
            ArchKind::Transformer => "transformer",
        })
    }
}

/// Architecture hyperparameters (everything except the vocabulary size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ArchKind,
    pub layers: usize,
    /// Decoder hidden width; a recurrent encoder uses two `hidden / 2` directions.
    pub hidden: usize,
    pub embed: usize,
    /// Attention heads (transformer only).
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feed-forward width (transformer only).
    #[serde(default)]
    pub ff: usize,
    #[serde(default = "default_tied")]
    pub tied: bool,
}

fn default_heads() -> usize {
    4
}

fn default_tied() -> bool {
    true
}

impl ModelConfig {
    pub fn default_teacher() -> Self {
        ModelConfig {
            kind: ArchKind::Transformer,
            layers: 2,
            hidden: 64,
            embed: 64,
            heads: 4,
            ff: 128,
            tied: true,
        }
    }

    pub fn default_student() -> Self {
        ModelConfig {
            kind: ArchKind::Recurrent,
            layers: 1,
            hidden: 64,
            embed: 64,
            heads: 1,
            ff: 0,
            tied: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.layers == 0 || self.hidden == 0 || self.embed == 0 {
            return bad("layers, hidden and embed must be positive");
        }
        match self.kind {
            ArchKind::Recurrent => {
                if self.hidden % 2 != 0 {
                    return bad("recurrent hidden width must be even (two encoder directions)");
                }
            }
            ArchKind::Transformer => {
                if self.heads == 0 || self.hidden % self.heads != 0 {
                    return bad("hidden must be divisible by heads");
                }
                if self.embed != self.hidden {
                    return bad("transformer embed must equal hidden");
                }
                if self.ff == 0 {
                    return bad("transformer ff width must be positive");
                }
            }
        }
        Ok(())
    }
}

/// Padded source batch, `[batch, max_len]`, padding at the end of each row.
#[derive(Debug, Clone)]
pub(crate) struct Padded {
    pub ids: Vec<TokenId>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl Padded {
    pub fn new(seqs: &[&[TokenId]]) -> Self {
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * max_len..b * max_len + s.len()].copy_from_slice(s);
        }
        Padded {
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            max_len,
        }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Encoder output for a batch of sources, stored batch-major.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub(crate) lengths: Vec<usize>,
    pub(crate) max_len: usize,
    pub(crate) hidden: usize,
    /// `[batch, max_len, hidden]`.
    pub(crate) states: Vec<f64>,
    /// Transformer only: per decoder layer, cross-attention keys and values,
    /// each `[batch, heads, max_len, head_dim]`.
    pub(crate) cross_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EncodedBatch {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn source_len(&self, i: usize) -> usize {
        self.lengths[i]
    }

    /// Encoder states for source `i`, `source_len(i) x hidden`, row-major.
    pub fn states_of(&self, i: usize) -> &[f64] {
        let start = i * self.max_len * self.hidden;
        &self.states[start..start + self.lengths[i] * self.hidden]
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Additive mask hiding the padding of each row's source, `rows_per` rows each.
    pub(crate) fn key_mask(&self, src_index: &[usize], rows_per: usize) -> Vec<f64> {
        let lengths: Vec<usize> = src_index.iter().map(|&i| self.lengths[i]).collect();
        pad_mask(&lengths, rows_per, self.max_len)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum StateKind {
    /// Per layer `[rows, hidden]` cell states.
    Recurrent { cells: Vec<Vec<f64>> },
    /// Per layer self-attention caches `[rows * heads, position, head_dim]`.
    Transformer { keys: Vec<Vec<f64>>, values: Vec<Vec<f64>> },
}

/// Incremental decoding state for a set of hypotheses (rows).
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub(crate) src_index: Vec<usize>,
    pub(crate) position: usize,
    pub(crate) kind: StateKind,
}

impl DecoderState {
    pub fn rows(&self) -> usize {
        self.src_index.len()
    }

    /// Number of tokens consumed so far (BOS included).
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn src_index(&self) -> &[usize] {
        &self.src_index
    }

    /// State of the chosen rows, in order; used to reorder beams.
    pub fn select(&self, rows: &[usize]) -> DecoderState {
        let n = self.rows();
        let pick = |buf: &Vec<f64>| -> Vec<f64> {
            let w = if n == 0 { 0 } else { buf.len() / n };
            let mut out = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                out.extend_from_slice(&buf[r * w..(r + 1) * w]);
            }
            out
        };
        let kind = match &self.kind {
            StateKind::Recurrent { cells } => StateKind::Recurrent {
                cells: cells.iter().map(pick).collect(),
            },
            StateKind::Transformer { keys, values } => StateKind::Transformer {
                keys: keys.iter().map(pick).collect(),
                values: values.iter().map(pick).collect(),
            },
        };
        DecoderState {
            src_index: rows.iter().map(|&r| self.src_index[r]).collect(),
            position: self.position,
            kind,
        }
    }
}

/// Teacher-forced logits for a padded batch of contexts.
#[derive(Debug, Clone, Copy)]
pub struct ForcedLogits {
    /// `[batch * max_len, vocab]`, row `b * max_len + t` predicts token `t` of context `b`.
    pub logits: Var,
    pub max_len: usize,
}

/// An autoregressive encoder-decoder with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamSet,
}

impl PolicyModel {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match config.kind {
            ArchKind::Recurrent => recurrent::init(&config, vocab_size, &mut rng)?,
            ArchKind::Transformer => transformer::init(&config, vocab_size, &mut rng)?,
        };
        Ok(PolicyModel {
            config,
            vocab_size,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Name of the decoder embedding matrix (shared with the output layer when tied).
    pub fn decoder_embedding_name(&self) -> &'static str {
        "dec.emb"
    }

    fn check_tokens(&self, seqs: &[&[TokenId]]) -> Result<()> {
        for s in seqs {
            if let Some(&t) = s.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::Vocab {
                    token: t,
                    size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Teacher-forced logits. Context `b` is fed as `[BOS, c_1 .. c_{n-1}]`, so
    /// row `t` holds the distribution over `c_{t+1}` given `c_1..c_t`.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        sources: &[&[TokenId]],
        contexts: &[&[TokenId]],
    ) -> Result<ForcedLogits> {
        if sources.is_empty() || sources.len() != contexts.len() {
            return Err(Error::Contract("forward needs equally many nonempty sources and contexts".into()));
        }
        if sources.iter().any(|s| s.is_empty()) || contexts.iter().any(|c| c.is_empty()) {
            return Err(Error::Contract("sources and contexts must be nonempty".into()));
        }
        self.check_tokens(sources)?;
        self.check_tokens(contexts)?;
        let inputs: Vec<Vec<TokenId>> = contexts
            .iter()
            .map(|c| std::iter::once(BOS).chain(c[..c.len() - 1].iter().copied()).collect())
            .collect();
        let input_refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let src = Padded::new(sources);
        let dec = Padded::new(&input_refs);
        let logits = match self.config.kind {
            ArchKind::Recurrent => recurrent::forward(self, tape, &src, &dec)?,
            ArchKind::Transformer => transformer::forward(self, tape, &src, &dec)?,
        };
        Ok(ForcedLogits {
            logits,
            max_len: dec.max_len,
        })
    }

    /// Encodes a batch of sources for incremental decoding.
    pub fn encode(&self, sources: &[&[TokenId]]) -> Result<EncodedBatch> {
        if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("encode needs nonempty sources".into()));
        }
        self.check_tokens(sources)?;
        let src = Padded::new(sources);
        match self.config.kind {
            ArchKind::Recurrent => recurrent::encode(self, &src),
            ArchKind::Transformer => transformer::encode(self, &src),
        }
    }

    /// Fresh decoding state; row `i` decodes source `src_index[i]` of `enc`.
    pub fn start(&self, enc: &EncodedBatch, src_index: &[usize]) -> Result<DecoderState> {
        if let Some(&bad) = src_index.iter().find(|&&i| i >= enc.batch()) {
            return Err(Error::Contract(format!("source index {bad} outside encoded batch of {}", enc.batch())));
        }
        let rows = src_index.len();
        let kind = match self.config.kind {
            ArchKind::Recurrent => StateKind::Recurrent {
                cells: vec![vec![0.0; rows * self.config.hidden]; self.config.layers],
            },
            ArchKind::Transformer => StateKind::Transformer {
                keys: vec![Vec::new(); self.config.layers],
                values: vec![Vec::new(); self.config.layers],
            },
        };
        Ok(DecoderState {
            src_index: src_index.to_vec(),
            position: 0,
            kind,
        })
    }

    /// Feeds one token per row and returns `[rows, vocab]` logits for the next position.
    pub fn step(&self, enc: &EncodedBatch, state: &DecoderState, tokens: &[TokenId]) -> Result<(Vec<f64>, DecoderState)> {
        if tokens.len() != state.rows() {
            return Err(Error::Contract(format!(
                "step got {} tokens for {} rows",
                tokens.len(),
                state.rows()
            )));
        }
        self.check_tokens(&[tokens])?;
        match self.config.kind {
            ArchKind::Recurrent => recurrent::step(self, enc, state, tokens),
            ArchKind::Transformer => transformer::step(self, enc, state, tokens),
        }
    }

    /// Single-sequence form of [`PolicyModel::step`]: `prefix` starts with BOS and
    /// `state` must have consumed every prefix token except the last.
    pub fn step_logits(&self, enc: &EncodedBatch, prefix: &[TokenId], state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Contract("prefix must begin with BOS".into()));
        }
        if state.rows() != 1 || state.position() + 1 != prefix.len() {
            return Err(Error::Contract(format!(
                "state at position {} cannot extend a prefix of length {}",
                state.position(),
                prefix.len()
            )));
        }
        self.step(enc, state, &prefix[prefix.len() - 1..])
    }

    /// `Σ_t log π(y_t | y_<t, x)` for each pair, teacher-forced.
    pub fn sequence_logprobs(&self, sources: &[&[TokenId]], targets: &[&[TokenId]]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let fl = self.forward(&mut tape, sources, targets)?;
        let lp = tape.log_softmax(fl.logits)?;
        let v = tape.value(lp);
        let vs = self.vocab_size;
        Ok(targets
            .iter()
            .enumerate()
            .map(|(b, y)| {
                y.iter()
                    .enumerate()
                    .map(|(t, &tok)| v[(b * fl.max_len + t) * vs + tok])
                    .sum()
            })
            .collect())
    }

    pub fn sequence_logprob(&self, source: &[TokenId], target: &[TokenId]) -> Result<f64> {
        Ok(self.sequence_logprobs(&[source], &[target])?[0])
    }

    /// Largest relative error, `|analytic - numeric| / max(1, |analytic|)`,
    /// between the tape gradient of `loss` and central differences at the
    /// listed flat coordinates of parameter `name`.
    pub fn grad_check_param<F>(&self, name: &str, coords: &[usize], step: f64, loss: F) -> Result<f64>
    where
        F: for<'p> Fn(&mut Tape<'p>, &'p PolicyModel) -> Result<Var>,
    {
        let size = self
            .params
            .by_name(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?
            .len();
        if let Some(&c) = coords.iter().find(|&&c| c >= size) {
            return Err(Error::Contract(format!("coordinate {c} outside {name} of size {size}")));
        }
        let mut tape = Tape::new();
        let l = loss(&mut tape, self)?;
        tape.backward(l)?;
        let grads = tape.param_grads(&self.params);
        let analytic = grads
            .get(self.params.id(name)?)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; size]);
        drop(tape);

        let eval = |delta: f64, c: usize| -> Result<f64> {
            let mut m = self.clone();
            if let Some(t) = m.params.by_name_mut(name) {
                t.data_mut()[c] += delta;
            }
            let mut tape = Tape::no_grad();
            let l = loss(&mut tape, &m)?;
            Ok(tape.value(l)[0])
        };
        let mut worst: f64 = 0.0;
        for &c in coords {
            let numeric = (eval(step, c)? - eval(-step, c)?) / (2.0 * step);
            worst = worst.max((analytic[c] - numeric).abs() / analytic[c].abs().max(1.0));
        }
        Ok(worst)
    }

    /// Textual architecture line written at the top of model checkpoints.
    pub fn descriptor(&self) -> String {
        let c = &self.config;
        format!(
            "imitkd-model v1 kind={} layers={} hidden={} embed={} heads={} ff={} vocab={} tied={}",
            c.kind, c.layers, c.hidden, c.embed, c.heads, c.ff, self.vocab_size, c.tied
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "{}", self.descriptor())?;
        write_tensors(&mut f, &self.params)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let (config, vocab) = parse_descriptor(header.trim_end())?;
        let mut model = PolicyModel::new(config, vocab, 0)?;
        let stored = read_tensors(&mut r)?;
        model.params.load_from(&stored)?;
        Ok(model)
    }
}

fn parse_descriptor(line: &str) -> Result<(ModelConfig, usize)> {
    let mut words = line.split_whitespace();
    if words.next() != Some("imitkd-model") || words.next() != Some("v1") {
        return Err(Error::Format(format!("unrecognised model header {line:?}")));
    }
    let mut get = std::collections::HashMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {w:?}")))?;
        get.insert(k, v);
    }
    let field = |k: &str| -> Result<&str> {
        get.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("model header lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("model header field `{k}` is not a number")))
    };
    let kind = match field("kind")? {
        "recurrent" => ArchKind::Recurrent,
        "transformer" => ArchKind::Transformer,
        other => return Err(Error::Format(format!("unknown architecture {other:?}"))),
    };
    let tied = match field("tied")? {
        "true" => true,
        "false" => false,
        other => return Err(Error::Format(format!("bad tied flag {other:?}"))),
    };
    Ok((
        ModelConfig {
            kind,
            layers: num("layers")?,
            hidden: num("hidden")?,
            embed: num("embed")?,
            heads: num("heads")?,
            ff: num("ff")?,
            tied,
        },
        num("vocab")?,
    ))
}

/// Additive mask with `rows_per` rows per sequence hiding keys past its length.
pub(crate) fn pad_mask(lengths: &[usize], rows_per: usize, keys: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(lengths.len() * rows_per * keys);
    for &len in lengths {
        for _ in 0..rows_per {
            m.extend((0..keys).map(|j| if j < len { 0.0 } else { MASK_VALUE }));
        }
    }
    m
}

/// Xavier-uniform matrix.
pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], bound, rng)
}

pub(crate) fn embedding(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (3.0 / dim as f64).sqrt();
    let mut t = Tensor::uniform(vec![vocab, dim], bound, rng);
    t.data_mut()[PAD * dim..(PAD + 1) * dim].fill(0.0);
    t
}

/// Scaled dot-product attention over `[rows, q, d]` queries and `[rows, k, d]`
/// keys/values with an additive `[rows, q, k]` mask.
pub(crate) fn attend<'p>(tape: &mut Tape<'p>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let d = *tape.shape(q).last().unwrap_or(&1);
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let scores = match mask {
        Some(m) => tape.add(scores, m)?,
        None => scores,
    };
    let p = tape.softmax(scores)?;
    tape.matmul(p, v)
}

/// Logits from final decoder features `[rows, embed]`.
pub(crate) fn output_logits<'p>(model: &'p PolicyModel, tape: &mut Tape<'p>, feats: Var) -> Result<Var> {
    let p = &model.params;
    let logits = if model.config.tied {
        let emb = tape.param_named(p, "dec.emb")?;
        tape.matmul_t(feats, emb)?
    } else {
        let w = tape.param_named(p, "out.w")?;
        tape.matmul(feats, w)?
    };
    let bias = tape.param_named(p, "out.bias")?;
    tape.add_row(logits, bias)
}
