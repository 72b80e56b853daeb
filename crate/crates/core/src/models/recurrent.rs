//! Simple-recurrent-unit encoder-decoder with dot-product attention.
//!
//! Cell, per time step:
//! `f = σ(W_f x + b_f)`, `r = σ(W_r x + b_r)`, `c = f⊙c' + (1-f)⊙(W x)`,
//! `h = r⊙c + (1-r)⊙x̃`, where `x̃ = x` when widths agree and a learned
//! projection `W_h x` otherwise. Gates depend only on the input, so every
//! projection runs batched over time and only the cell update is sequential.

use rand_chacha::ChaCha8Rng;

use super::{attend, pad_mask, embedding, output_logits, xavier, DecoderState, EncodedBatch, ModelConfig, Padded, PolicyModel, StateKind};
use crate::data::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

fn blocks(input: usize, hidden: usize) -> usize {
    if input == hidden {
        3
    } else {
        4
    }
}

fn cell_params(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let k = blocks(input, hidden);
    let mut w = Tensor::zeros(vec![input, k * hidden]);
    // each block gets its own Xavier scale
    for blk in 0..k {
        let part = xavier(input, hidden, rng);
        for i in 0..input {
            w.data_mut()[i * k * hidden + blk * hidden..i * k * hidden + (blk + 1) * hidden]
                .copy_from_slice(&part.data()[i * hidden..(i + 1) * hidden]);
        }
    }
    params.insert(format!("{prefix}.w"), w)?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![2 * hidden]))?;
    Ok(())
}

pub(super) fn init(cfg: &ModelConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let (e, d) = (cfg.embed, cfg.hidden);
    let half = d / 2;
    let mut p = ParamSet::new();
    p.insert("enc.emb", embedding(vocab, e, rng))?;
    p.insert("dec.emb", embedding(vocab, e, rng))?;
    for l in 0..cfg.layers {
        let input = if l == 0 { e } else { d };
        cell_params(&mut p, &format!("enc.{l}.fwd"), input, half, rng)?;
        cell_params(&mut p, &format!("enc.{l}.bwd"), input, half, rng)?;
    }
    for l in 0..cfg.layers {
        let input = if l == 0 { e } else { d };
        cell_params(&mut p, &format!("dec.{l}"), input, d, rng)?;
    }
    p.insert("att.wq", xavier(d, d, rng))?;
    p.insert("out.proj", xavier(2 * d, e, rng))?;
    p.insert("out.proj_b", Tensor::zeros(vec![e]))?;
    if !cfg.tied {
        p.insert("out.w", xavier(e, vocab, rng))?;
    }
    p.insert("out.bias", Tensor::zeros(vec![vocab]))?;
    Ok(p)
}

/// One SRU layer over time-major `x: [T, B, in]`; returns `h: [T, B, hid]` and
/// the last cell state `[1, B, hid]`.
fn sru<'p>(
    model: &'p PolicyModel,
    tape: &mut Tape<'p>,
    prefix: &str,
    x: Var,
    hid: usize,
    c0: Option<Var>,
) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let (t_len, batch, input) = (s[0], s[1], s[2]);
    let k = blocks(input, hid);
    let w = tape.param_named(&model.params, &format!("{prefix}.w"))?;
    let b = tape.param_named(&model.params, &format!("{prefix}.b"))?;
    let u = tape.matmul(x, w)?;
    let z = tape.slice(u, 2, 0, hid)?;
    let fr = tape.slice(u, 2, hid, 2 * hid)?;
    let fr = tape.add_row(fr, b)?;
    let fr = tape.sigmoid(fr)?;
    let f = tape.slice(fr, 2, 0, hid)?;
    let r = tape.slice(fr, 2, hid, hid)?;
    let skip = if k == 4 { tape.slice(u, 2, 3 * hid, hid)? } else { x };

    let mut c = match c0 {
        Some(c) => c,
        None => tape.constant(Tensor::zeros(vec![1, batch, hid])),
    };
    let mut cells = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let zt = tape.slice(z, 0, t, 1)?;
        let ft = tape.slice(f, 0, t, 1)?;
        let diff = tape.sub(c, zt)?;
        let gated = tape.mul(ft, diff)?;
        c = tape.add(zt, gated)?;
        cells.push(c);
    }
    let all = if cells.len() == 1 { cells[0] } else { tape.concat(&cells, 0)? };
    // h = skip + r ⊙ (c - skip)
    let diff = tape.sub(all, skip)?;
    let gated = tape.mul(r, diff)?;
    let h = tape.add(skip, gated)?;
    Ok((h, c))
}

/// Bidirectional encoder states, batch-major `[B, S, d]`.
fn encoder_states<'p>(model: &'p PolicyModel, tape: &mut Tape<'p>, src: &Padded) -> Result<Var> {
    let cfg = &model.config;
    let (b, s) = (src.batch(), src.max_len);
    let half = cfg.hidden / 2;
    let mut fwd_ids = vec![PAD; s * b];
    let mut bwd_ids = vec![PAD; s * b];
    // time-major row of the reversed sequence that feeds original position (t, i)
    let mut unreverse = vec![0; s * b];
    for i in 0..b {
        let len = src.lengths[i];
        for t in 0..s {
            fwd_ids[t * b + i] = src.ids[i * s + t];
            if t < len {
                bwd_ids[t * b + i] = src.ids[i * s + len - 1 - t];
                unreverse[t * b + i] = (len - 1 - t) * b + i;
            } else {
                unreverse[t * b + i] = t * b + i;
            }
        }
    }
    let emb = tape.param_named(&model.params, "enc.emb")?;
    let xf = tape.gather_rows(emb, &fwd_ids)?;
    let xf = tape.reshape(xf, vec![s, b, cfg.embed])?;
    let xb = tape.gather_rows(emb, &bwd_ids)?;
    let xb = tape.reshape(xb, vec![s, b, cfg.embed])?;
    let mut x = (xf, xb);
    let mut out = None;
    for l in 0..cfg.layers {
        let (hf, _) = sru(model, tape, &format!("enc.{l}.fwd"), x.0, half, None)?;
        let (hb, _) = sru(model, tape, &format!("enc.{l}.bwd"), x.1, half, None)?;
        let hb_flat = tape.reshape(hb, vec![s * b, half])?;
        let hb_orig = tape.gather_rows(hb_flat, &unreverse)?;
        let hb_orig = tape.reshape(hb_orig, vec![s, b, half])?;
        let cat = tape.concat(&[hf, hb_orig], 2)?;
        if l + 1 < cfg.layers {
            // the reversed stream needs the concatenation in reversed order
            let hf_flat = tape.reshape(hf, vec![s * b, half])?;
            let hf_rev = tape.gather_rows(hf_flat, &unreverse)?;
            let hf_rev = tape.reshape(hf_rev, vec![s, b, half])?;
            let cat_rev = tape.concat(&[hf_rev, hb], 2)?;
            x = (cat, cat_rev);
        }
        out = Some(cat);
    }
    let out = out.ok_or_else(|| Error::Internal("encoder has no layers".into()))?;
    tape.permute(out, &[1, 0, 2])
}

/// Attention and output projection for decoder states `h: [B, T, d]` against
/// keys `[B, S, d]`; returns `[B * T, embed]` features.
fn readout<'p>(model: &'p PolicyModel, tape: &mut Tape<'p>, h: Var, keys: Var, mask: Var) -> Result<Var> {
    let cfg = &model.config;
    let s = tape.shape(h).to_vec();
    let wq = tape.param_named(&model.params, "att.wq")?;
    let q = tape.matmul(h, wq)?;
    let ctx = attend(tape, q, keys, keys, Some(mask))?;
    let cat = tape.concat(&[h, ctx], 2)?;
    let proj = tape.param_named(&model.params, "out.proj")?;
    let pb = tape.param_named(&model.params, "out.proj_b")?;
    let o = tape.matmul(cat, proj)?;
    let o = tape.add_row(o, pb)?;
    let o = tape.tanh(o)?;
    tape.reshape(o, vec![s[0] * s[1], cfg.embed])
}

pub(super) fn forward<'p>(model: &'p PolicyModel, tape: &mut Tape<'p>, src: &Padded, dec: &Padded) -> Result<Var> {
    let cfg = &model.config;
    let keys = encoder_states(model, tape, src)?;
    let (b, t) = (dec.batch(), dec.max_len);
    let mut tm = vec![PAD; t * b];
    for i in 0..b {
        for j in 0..t {
            tm[j * b + i] = dec.ids[i * t + j];
        }
    }
    let emb = tape.param_named(&model.params, "dec.emb")?;
    let x = tape.gather_rows(emb, &tm)?;
    let mut x = tape.reshape(x, vec![t, b, cfg.embed])?;
    for l in 0..cfg.layers {
        x = sru(model, tape, &format!("dec.{l}"), x, cfg.hidden, None)?.0;
    }
    let h = tape.permute(x, &[1, 0, 2])?;
    let mask = tape.constant_data(vec![b, t, src.max_len], pad_mask(&src.lengths, t, src.max_len))?;
    let feats = readout(model, tape, h, keys, mask)?;
    output_logits(model, tape, feats)
}

pub(super) fn encode(model: &PolicyModel, src: &Padded) -> Result<EncodedBatch> {
    let mut tape = Tape::no_grad();
    let states = encoder_states(model, &mut tape, src)?;
    Ok(EncodedBatch {
        lengths: src.lengths.clone(),
        max_len: src.max_len,
        hidden: model.config.hidden,
        states: tape.value(states).to_vec(),
        cross_kv: Vec::new(),
    })
}

pub(super) fn step(
    model: &PolicyModel,
    enc: &EncodedBatch,
    state: &DecoderState,
    tokens: &[TokenId],
) -> Result<(Vec<f64>, DecoderState)> {
    let cfg = &model.config;
    let StateKind::Recurrent { cells } = &state.kind else {
        return Err(Error::Contract("decoder state does not belong to a recurrent model".into()));
    };
    let n = tokens.len();
    let d = cfg.hidden;
    let mut tape = Tape::no_grad();
    let emb = tape.param_named(&model.params, "dec.emb")?;
    let x = tape.gather_rows(emb, tokens)?;
    let mut x = tape.reshape(x, vec![1, n, cfg.embed])?;
    let mut new_cells = Vec::with_capacity(cfg.layers);
    for (l, cell) in cells.iter().enumerate() {
        let c0 = tape.constant_data(vec![1, n, d], cell.clone())?;
        let (h, c) = sru(model, &mut tape, &format!("dec.{l}"), x, d, Some(c0))?;
        new_cells.push(tape.value(c).to_vec());
        x = h;
    }
    let h = tape.reshape(x, vec![n, 1, d])?;
    let s = enc.max_len;
    let mut kd = Vec::with_capacity(n * s * d);
    for &src in &state.src_index {
        kd.extend_from_slice(&enc.states[src * s * d..(src + 1) * s * d]);
    }
    let keys = tape.constant_data(vec![n, s, d], kd)?;
    let mask = tape.constant_data(vec![n, 1, s], enc.key_mask(&state.src_index, 1))?;
    let feats = readout(model, &mut tape, h, keys, mask)?;
    let logits = output_logits(model, &mut tape, feats)?;
    Ok((
        tape.value(logits).to_vec(),
        DecoderState {
            src_index: state.src_index.clone(),
            position: state.position + 1,
            kind: StateKind::Recurrent { cells: new_cells },
        },
    ))
}
