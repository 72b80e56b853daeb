//! Pre-norm transformer encoder-decoder with sinusoidal positions.

use rand_chacha::ChaCha8Rng;

use super::{
    attend, embedding, output_logits, pad_mask, xavier, DecoderState, EncodedBatch, ModelConfig, Padded, PolicyModel,
    StateKind, MASK_VALUE,
};
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

fn linear_params(p: &mut ParamSet, w: &str, b: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    p.insert(w, xavier(input, output, rng))?;
    p.insert(b, Tensor::zeros(vec![output]))?;
    Ok(())
}

fn norm_params(p: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    p.insert(format!("{prefix}.g"), Tensor::filled(vec![d], 1.0))?;
    p.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]))?;
    Ok(())
}

fn ff_params(p: &mut ParamSet, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    linear_params(p, &format!("{prefix}.ff.w1"), &format!("{prefix}.ff.b1"), d, ff, rng)?;
    linear_params(p, &format!("{prefix}.ff.w2"), &format!("{prefix}.ff.b2"), ff, d, rng)
}

pub(super) fn init(cfg: &ModelConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let (d, ff) = (cfg.hidden, cfg.ff);
    let mut p = ParamSet::new();
    p.insert("enc.emb", embedding(vocab, d, rng))?;
    p.insert("dec.emb", embedding(vocab, d, rng))?;
    for l in 0..cfg.layers {
        let pre = format!("enc.{l}");
        norm_params(&mut p, &format!("{pre}.ln1"), d)?;
        linear_params(&mut p, &format!("{pre}.att.wqkv"), &format!("{pre}.att.bqkv"), d, 3 * d, rng)?;
        linear_params(&mut p, &format!("{pre}.att.wo"), &format!("{pre}.att.bo"), d, d, rng)?;
        norm_params(&mut p, &format!("{pre}.ln2"), d)?;
        ff_params(&mut p, &pre, d, ff, rng)?;
    }
    norm_params(&mut p, "enc.ln", d)?;
    for l in 0..cfg.layers {
        let pre = format!("dec.{l}");
        norm_params(&mut p, &format!("{pre}.ln1"), d)?;
        linear_params(&mut p, &format!("{pre}.self.wqkv"), &format!("{pre}.self.bqkv"), d, 3 * d, rng)?;
        linear_params(&mut p, &format!("{pre}.self.wo"), &format!("{pre}.self.bo"), d, d, rng)?;
        norm_params(&mut p, &format!("{pre}.ln2"), d)?;
        linear_params(&mut p, &format!("{pre}.cross.wq"), &format!("{pre}.cross.bq"), d, d, rng)?;
        linear_params(&mut p, &format!("{pre}.cross.wkv"), &format!("{pre}.cross.bkv"), d, 2 * d, rng)?;
        linear_params(&mut p, &format!("{pre}.cross.wo"), &format!("{pre}.cross.bo"), d, d, rng)?;
        norm_params(&mut p, &format!("{pre}.ln3"), d)?;
        ff_params(&mut p, &pre, d, ff, rng)?;
    }
    norm_params(&mut p, "dec.ln", d)?;
    if !cfg.tied {
        p.insert("out.w", xavier(d, vocab, rng))?;
    }
    p.insert("out.bias", Tensor::zeros(vec![vocab]))?;
    Ok(p)
}

/// Sinusoidal encoding of one position.
pub(crate) fn position_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let freq = 1.0 / 10000f64.powf((j - j % 2) as f64 / d as f64);
            let a = pos as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

struct Ctx<'m> {
    model: &'m PolicyModel,
    d: usize,
    heads: usize,
}

impl<'p> Ctx<'p> {
    fn new(model: &'p PolicyModel) -> Self {
        Ctx {
            model,
            d: model.config.hidden,
            heads: model.config.heads,
        }
    }

    fn dh(&self) -> usize {
        self.d / self.heads
    }

    fn linear(&self, tape: &mut Tape<'p>, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = tape.param_named(&self.model.params, w)?;
        let bv = tape.param_named(&self.model.params, b)?;
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    fn norm(&self, tape: &mut Tape<'p>, x: Var, prefix: &str) -> Result<Var> {
        let g = tape.param_named(&self.model.params, &format!("{prefix}.g"))?;
        let b = tape.param_named(&self.model.params, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn feed_forward(&self, tape: &mut Tape<'p>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.ff.w1"), &format!("{prefix}.ff.b1"))?;
        let h = tape.relu(h)?;
        self.linear(tape, h, &format!("{prefix}.ff.w2"), &format!("{prefix}.ff.b2"))
    }

    /// `[B, T, d]` to `[B * H, T, dh]`.
    fn split(&self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let y = tape.reshape(x, vec![s[0], s[1], self.heads, self.dh()])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, vec![s[0] * self.heads, s[1], self.dh()])
    }

    /// `[B * H, T, dh]` to `[B, T, d]`.
    fn merge(&self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let b = s[0] / self.heads;
        let y = tape.reshape(x, vec![b, self.heads, s[1], self.dh()])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, vec![b, s[1], self.d])
    }

    /// Token embeddings scaled by `sqrt(d)` plus positions `offset..`, as `[B, T, d]`.
    fn embed(&self, tape: &mut Tape<'p>, table: &str, ids: &[TokenId], b: usize, t: usize, offset: usize) -> Result<Var> {
        let emb = tape.param_named(&self.model.params, table)?;
        let x = tape.gather_rows(emb, ids)?;
        let x = tape.scale(x, (self.d as f64).sqrt())?;
        let mut pe = Vec::with_capacity(b * t * self.d);
        let rows: Vec<Vec<f64>> = (0..t).map(|j| position_encoding(offset + j, self.d)).collect();
        for _ in 0..b {
            for r in &rows {
                pe.extend_from_slice(r);
            }
        }
        let pe = tape.constant_data(vec![b * t, self.d], pe)?;
        let x = tape.add(x, pe)?;
        tape.reshape(x, vec![b, t, self.d])
    }

    fn encoder(&self, tape: &mut Tape<'p>, src: &Padded) -> Result<Var> {
        let (b, s) = (src.batch(), src.max_len);
        let mut x = self.embed(tape, "enc.emb", &src.ids, b, s, 0)?;
        let mask = tape.constant_data(vec![b * self.heads, s, s], pad_mask(&src.lengths, self.heads * s, s))?;
        for l in 0..self.model.config.layers {
            let pre = format!("enc.{l}");
            let a = self.norm(tape, x, &format!("{pre}.ln1"))?;
            let qkv = self.linear(tape, a, &format!("{pre}.att.wqkv"), &format!("{pre}.att.bqkv"))?;
            let q = tape.slice(qkv, 2, 0, self.d)?;
            let k = tape.slice(qkv, 2, self.d, self.d)?;
            let v = tape.slice(qkv, 2, 2 * self.d, self.d)?;
            let (q, k, v) = (self.split(tape, q)?, self.split(tape, k)?, self.split(tape, v)?);
            let ctx = attend(tape, q, k, v, Some(mask))?;
            let ctx = self.merge(tape, ctx)?;
            let o = self.linear(tape, ctx, &format!("{pre}.att.wo"), &format!("{pre}.att.bo"))?;
            x = tape.add(x, o)?;
            let a = self.norm(tape, x, &format!("{pre}.ln2"))?;
            let f = self.feed_forward(tape, a, &pre)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, x, "enc.ln")
    }

    /// Cross-attention keys and values of decoder layer `l`, each `[B * H, S, dh]`.
    fn cross_kv(&self, tape: &mut Tape<'p>, enc_out: Var, l: usize) -> Result<(Var, Var)> {
        let pre = format!("dec.{l}.cross");
        let kv = self.linear(tape, enc_out, &format!("{pre}.wkv"), &format!("{pre}.bkv"))?;
        let k = tape.slice(kv, 2, 0, self.d)?;
        let v = tape.slice(kv, 2, self.d, self.d)?;
        Ok((self.split(tape, k)?, self.split(tape, v)?))
    }

    /// One decoder layer. `past` holds cached self-attention keys/values to
    /// prepend; returns the new activations and the full self-attention K/V.
    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        tape: &mut Tape<'p>,
        l: usize,
        x: Var,
        past: Option<(Var, Var)>,
        self_mask: Option<Var>,
        cross: (Var, Var),
        cross_mask: Var,
    ) -> Result<(Var, Var, Var)> {
        let pre = format!("dec.{l}");
        let a = self.norm(tape, x, &format!("{pre}.ln1"))?;
        let qkv = self.linear(tape, a, &format!("{pre}.self.wqkv"), &format!("{pre}.self.bqkv"))?;
        let q = tape.slice(qkv, 2, 0, self.d)?;
        let k = tape.slice(qkv, 2, self.d, self.d)?;
        let v = tape.slice(qkv, 2, 2 * self.d, self.d)?;
        let (q, mut k, mut v) = (self.split(tape, q)?, self.split(tape, k)?, self.split(tape, v)?);
        if let Some((pk, pv)) = past {
            k = tape.concat(&[pk, k], 1)?;
            v = tape.concat(&[pv, v], 1)?;
        }
        let ctx = attend(tape, q, k, v, self_mask)?;
        let ctx = self.merge(tape, ctx)?;
        let o = self.linear(tape, ctx, &format!("{pre}.self.wo"), &format!("{pre}.self.bo"))?;
        let mut x = tape.add(x, o)?;

        let a = self.norm(tape, x, &format!("{pre}.ln2"))?;
        let q = self.linear(tape, a, &format!("{pre}.cross.wq"), &format!("{pre}.cross.bq"))?;
        let q = self.split(tape, q)?;
        let ctx = attend(tape, q, cross.0, cross.1, Some(cross_mask))?;
        let ctx = self.merge(tape, ctx)?;
        let o = self.linear(tape, ctx, &format!("{pre}.cross.wo"), &format!("{pre}.cross.bo"))?;
        x = tape.add(x, o)?;

        let a = self.norm(tape, x, &format!("{pre}.ln3"))?;
        let f = self.feed_forward(tape, a, &pre)?;
        x = tape.add(x, f)?;
        Ok((x, k, v))
    }
}

pub(super) fn forward<'p>(model: &'p PolicyModel, tape: &mut Tape<'p>, src: &Padded, dec: &Padded) -> Result<Var> {
    let c = Ctx::new(model);
    let enc_out = c.encoder(tape, src)?;
    let (b, t, s) = (dec.batch(), dec.max_len, src.max_len);
    let mut causal = Vec::with_capacity(b * c.heads * t * t);
    for _ in 0..b * c.heads {
        for i in 0..t {
            causal.extend((0..t).map(|j| if j <= i { 0.0 } else { MASK_VALUE }));
        }
    }
    let causal = tape.constant_data(vec![b * c.heads, t, t], causal)?;
    let cross_mask = tape.constant_data(vec![b * c.heads, t, s], pad_mask(&src.lengths, c.heads * t, s))?;
    let mut x = c.embed(tape, "dec.emb", &dec.ids, b, t, 0)?;
    for l in 0..model.config.layers {
        let cross = c.cross_kv(tape, enc_out, l)?;
        x = c.decoder_layer(tape, l, x, None, Some(causal), cross, cross_mask)?.0;
    }
    let x = c.norm(tape, x, "dec.ln")?;
    let x = tape.reshape(x, vec![b * t, c.d])?;
    output_logits(model, tape, x)
}

pub(super) fn encode(model: &PolicyModel, src: &Padded) -> Result<EncodedBatch> {
    let c = Ctx::new(model);
    let mut tape = Tape::no_grad();
    let enc_out = c.encoder(&mut tape, src)?;
    let mut cross_kv = Vec::with_capacity(model.config.layers);
    for l in 0..model.config.layers {
        let (k, v) = c.cross_kv(&mut tape, enc_out, l)?;
        cross_kv.push((tape.value(k).to_vec(), tape.value(v).to_vec()));
    }
    Ok(EncodedBatch {
        lengths: src.lengths.clone(),
        max_len: src.max_len,
        hidden: c.d,
        states: tape.value(enc_out).to_vec(),
        cross_kv,
    })
}

pub(super) fn step(
    model: &PolicyModel,
    enc: &EncodedBatch,
    state: &DecoderState,
    tokens: &[TokenId],
) -> Result<(Vec<f64>, DecoderState)> {
    let StateKind::Transformer { keys, values } = &state.kind else {
        return Err(Error::Contract("decoder state does not belong to a transformer".into()));
    };
    let c = Ctx::new(model);
    let (n, s, h, dh) = (tokens.len(), enc.max_len, c.heads, c.dh());
    let pos = state.position;
    let mut tape = Tape::no_grad();
    let cross_mask = tape.constant_data(vec![n * h, 1, s], enc.key_mask(&state.src_index, h))?;
    let mut x = c.embed(&mut tape, "dec.emb", tokens, n, 1, pos)?;
    let block = h * s * dh;
    let (mut new_k, mut new_v) = (Vec::new(), Vec::new());
    for l in 0..model.config.layers {
        let (ek, ev) = &enc.cross_kv[l];
        let mut kd = Vec::with_capacity(n * block);
        let mut vd = Vec::with_capacity(n * block);
        for &src in &state.src_index {
            kd.extend_from_slice(&ek[src * block..(src + 1) * block]);
            vd.extend_from_slice(&ev[src * block..(src + 1) * block]);
        }
        let ck = tape.constant_data(vec![n * h, s, dh], kd)?;
        let cv = tape.constant_data(vec![n * h, s, dh], vd)?;
        let past = if pos == 0 {
            None
        } else {
            Some((
                tape.constant_data(vec![n * h, pos, dh], keys[l].clone())?,
                tape.constant_data(vec![n * h, pos, dh], values[l].clone())?,
            ))
        };
        let (y, k, v) = c.decoder_layer(&mut tape, l, x, past, None, (ck, cv), cross_mask)?;
        new_k.push(tape.value(k).to_vec());
        new_v.push(tape.value(v).to_vec());
        x = y;
    }
    let x = c.norm(&mut tape, x, "dec.ln")?;
    let x = tape.reshape(x, vec![n, c.d])?;
    let logits = output_logits(model, &mut tape, x)?;
    Ok((
        tape.value(logits).to_vec(),
        DecoderState {
            src_index: state.src_index.clone(),
            position: pos + 1,
            kind: StateKind::Transformer {
                keys: new_k,
                values: new_v,
            },
        },
    ))
}
