//! Self-attention text encoder returning every layer output `H^0 … H^L`.

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{EmbedCombine, ModelConfig};
use crate::corpus::{Text, BOUNDARY_LEVELS, PHONE_VOCAB, TONE_VOCAB};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, ParamId, Tape};

/// Sinusoidal positions: even columns `sin(p / 10000^(2i/d))`, odd columns the cosine.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d as f64);
            data[p * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("non-empty")
}

/// Row-wise scaled dot-product attention. `mask` is added to the logits
/// (`0` for visible keys, `-1e9` for hidden ones) and broadcasts over rows.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let dq = g.shape(q)[1];
    if g.shape(k)[1] != dq || g.shape(v)[0] != g.shape(k)[0] {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (dq as f64).sqrt());
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let w = g.softmax(logits, 1)?;
    let ctx = g.matmul(w, v)?;
    Ok((w, ctx))
}

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    d: usize,
    heads: usize,
    combine: EmbedCombine,
    phone: ParamId,
    tone: ParamId,
    boundary: ParamId,
    prenet: Vec<(ParamId, ParamId, LayerNorm)>,
    blocks: Vec<Block>,
}

/// Encoder outputs on a tape, plus per-block attention weights (one var per head).
pub struct EncoderStack {
    pub layers: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let (dp, dt, db) = match cfg.embed_combine {
            EmbedCombine::Sum => (d, d, d),
            EmbedCombine::Concat => (d - 2 * (d / 4), d / 4, d / 4),
        };
        b.scope("encoder", |b| {
            let phone = b.xavier("phone_embed", &[PHONE_VOCAB, dp], PHONE_VOCAB, dp)?;
            let tone = b.xavier("tone_embed", &[TONE_VOCAB, dt], TONE_VOCAB, dt)?;
            let boundary = b.xavier("boundary_embed", &[BOUNDARY_LEVELS, db], BOUNDARY_LEVELS, db)?;
            let k = cfg.prenet_kernel;
            let prenet = (0..cfg.prenet_layers)
                .map(|i| {
                    b.scope(&format!("prenet{i}"), |b| {
                        Ok((
                            b.xavier("w", &[k, d, d], k * d, k * d)?,
                            b.constant("b", &[d], 0.0)?,
                            b.layer_norm("ln", d)?,
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let hidden = cfg.ffn_mult * d;
            let blocks = (0..cfg.enc_blocks)
                .map(|i| {
                    b.scope(&format!("block{i}"), |b| {
                        Ok(Block {
                            q: b.linear("q", d, d)?,
                            k: b.linear("k", d, d)?,
                            v: b.linear("v", d, d)?,
                            o: b.linear("o", d, d)?,
                            ln1: b.layer_norm("ln1", d)?,
                            ff1: b.linear("ff1", d, hidden)?,
                            ff2: b.linear("ff2", hidden, d)?,
                            ln2: b.layer_norm("ln2", d)?,
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(TextEncoder {
                d,
                heads: cfg.enc_heads,
                combine: cfg.embed_combine,
                phone,
                tone,
                boundary,
                prenet,
                blocks,
            })
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Symbol embeddings merged per config, without positions.
    pub fn symbol_embeddings(&self, t: &mut Tape<'_>, text: &Text) -> Result<Var> {
        text.validate()?;
        let (p, to, bo) = (t.p(self.phone), t.p(self.tone), t.p(self.boundary));
        let ep = t.g.embedding(p, &text.phones)?;
        let et = t.g.embedding(to, &text.tones)?;
        let eb = t.g.embedding(bo, &text.boundaries)?;
        match self.combine {
            EmbedCombine::Sum => {
                let s = t.g.add(ep, et)?;
                t.g.add(s, eb)
            }
            EmbedCombine::Concat => t.g.concat(&[ep, et, eb], 1),
        }
    }

    pub fn embed_inputs(&self, t: &mut Tape<'_>, text: &Text) -> Result<Var> {
        let e = self.symbol_embeddings(t, text)?;
        let pe = t.constant(positional_encoding(text.len(), self.d));
        t.g.add(e, pe)
    }

    /// Prenet over `x`; `keep` (N×1 of 0/1) zeroes padded rows before each conv.
    pub fn prenet(&self, t: &mut Tape<'_>, x: Var, keep: Option<Var>) -> Result<Var> {
        let mut h = x;
        for (w, b, ln) in &self.prenet {
            if let Some(m) = keep {
                h = t.g.mul(h, m)?;
            }
            let (wv, bv) = (t.p(*w), t.p(*b));
            let c = t.g.conv1d(h, wv, bv, 1)?;
            let r = t.g.relu(c);
            h = ln.forward(t, r)?;
        }
        Ok(h)
    }

    /// Block `index` applied to `h`; returns `H^l` and per-head weights.
    pub fn self_attention_block(&self, t: &mut Tape<'_>, index: usize, h: Var) -> Result<(Var, Vec<Var>)> {
        let blk = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::invalid("self_attention_block", format!("no block {index}")))?;
        self.block(t, blk, h, None)
    }

    /// Multi-head self-attention, residual, LN, FFN, residual, LN.
    fn block(&self, t: &mut Tape<'_>, blk: &Block, h: Var, mask: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let q = blk.q.forward(t, h)?;
        let k = blk.k.forward(t, h)?;
        let v = blk.v.forward(t, h)?;
        let dh = self.d / self.heads;
        let mut ctxs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = t.g.slice(q, 1, i * dh, dh)?;
            let ki = t.g.slice(k, 1, i * dh, dh)?;
            let vi = t.g.slice(v, 1, i * dh, dh)?;
            let (w, c) = scaled_dot_attention(&mut t.g, qi, ki, vi, mask)?;
            weights.push(w);
            ctxs.push(c);
        }
        let cat = t.g.concat(&ctxs, 1)?;
        let mh = blk.o.forward(t, cat)?;
        let res = t.g.add(mh, h)?;
        let c = blk.ln1.forward(t, res)?;
        let f = blk.ff1.forward(t, c)?;
        let f = t.g.relu(f);
        let f = blk.ff2.forward(t, f)?;
        let res = t.g.add(f, c)?;
        Ok((blk.ln2.forward(t, res)?, weights))
    }

    pub fn encode(&self, t: &mut Tape<'_>, text: &Text) -> Result<EncoderStack> {
        let x = self.embed_inputs(t, text)?;
        self.encode_from(t, x, None)
    }

    /// Encodes `text` padded with symbol 0 to `padded_len` positions; padded
    /// keys are masked and padded rows are zeroed ahead of every convolution.
    pub fn encode_padded(&self, t: &mut Tape<'_>, text: &Text, padded_len: usize) -> Result<EncoderStack> {
        let n = text.len();
        if padded_len < n {
            return Err(Error::invalid("encode_padded", format!("padded length {padded_len} < {n}")));
        }
        let pad = |s: &[usize]| s.iter().copied().chain(std::iter::repeat_n(0, padded_len - n)).collect();
        let padded = Text {
            phones: pad(&text.phones),
            tones: pad(&text.tones),
            boundaries: pad(&text.boundaries),
        };
        let x = self.embed_inputs(t, &padded)?;
        let keep: Vec<f64> = (0..padded_len).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
        let logit_mask: Vec<f64> = keep.iter().map(|&k| if k > 0.0 { 0.0 } else { -1e9 }).collect();
        let keep = t.constant(Tensor::new(vec![padded_len, 1], keep)?);
        let mask = t.constant(Tensor::row(logit_mask));
        self.encode_from(t, x, Some((keep, mask)))
    }

    fn encode_from(&self, t: &mut Tape<'_>, x: Var, masks: Option<(Var, Var)>) -> Result<EncoderStack> {
        let h0 = self.prenet(t, x, masks.map(|m| m.0))?;
        let mut layers = vec![h0];
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (h, w) = self.block(t, blk, *layers.last().unwrap(), masks.map(|m| m.1))?;
            layers.push(h);
            attention.push(w);
        }
        Ok(EncoderStack { layers, attention })
    }
}
