//! Per-position multi-head attention across encoder layers.
//!
//! Keys and values at position `n` are `H^0_n … H^L_n` plus `H^L_n` a second
//! time, so every position attends over `L + 2` entries. Queries live in model
//! space and are split into heads after projection.

use crate::autodiff::{Tensor, Var};
use crate::config::{ModelConfig, QuerySource};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, ParamId, Tape};

#[derive(Clone, Debug)]
pub struct Aggregator {
    source: QuerySource,
    d: usize,
    heads: usize,
    textual: Option<Linear>,
    acoustic: Option<(Linear, Linear)>,
    gate: Option<ParamId>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

/// Aggregated output plus the per-head `N×(L+2)` layer weights.
pub struct Aggregated {
    pub output: Var,
    pub weights: Vec<Var>,
    pub query: Var,
}

impl Aggregator {
    /// `layers` is the encoder stack length `L + 1`.
    pub fn new(b: &mut Builder, cfg: &ModelConfig, source: QuerySource, layers: usize) -> Result<Self> {
        if source == QuerySource::None {
            return Err(Error::invalid("Aggregator::new", "query source None has no aggregator"));
        }
        let d = cfg.d_model;
        let uses_text = matches!(source, QuerySource::Textual | QuerySource::Combined);
        let uses_acoustic = matches!(source, QuerySource::Acoustic | QuerySource::Combined);
        b.scope("aggregation", |b| {
            let textual = if uses_text {
                Some(b.linear("query_textual", layers * d, d)?)
            } else {
                None
            };
            let acoustic = if uses_acoustic {
                Some((
                    b.linear("query_acoustic1", cfg.latent_dim, cfg.query_hidden)?,
                    b.linear("query_acoustic2", cfg.query_hidden, d)?,
                ))
            } else {
                None
            };
            let gate = if source == QuerySource::Combined {
                Some(b.constant("gate", &[1], 0.0)?)
            } else {
                None
            };
            Ok(Aggregator {
                source,
                d,
                heads: cfg.agg_heads,
                textual,
                acoustic,
                gate,
                q: b.linear("q", d, d)?,
                k: b.linear("k", d, d)?,
                v: b.linear("v", d, d)?,
                o: b.linear("o", d, d)?,
                ln1: b.layer_norm("ln1", d)?,
                ff1: b.linear("ff1", d, cfg.ffn_mult * d)?,
                ff2: b.linear("ff2", cfg.ffn_mult * d, d)?,
                ln2: b.layer_norm("ln2", d)?,
            })
        })
    }

    pub fn source(&self) -> QuerySource {
        self.source
    }

    pub fn gate_param(&self) -> Option<ParamId> {
        self.gate
    }

    /// `Q^t = tanh(W [H^0 ‖ … ‖ H^L] + b)`, `N×d`.
    pub fn textual_query(&self, t: &mut Tape<'_>, layers: &[Var]) -> Result<Var> {
        let lin = self
            .textual
            .ok_or_else(|| Error::invalid("textual_query", "aggregator has no textual query"))?;
        let cat = t.g.concat(layers, 1)?;
        let q = lin.forward(t, cat)?;
        Ok(t.g.tanh(q))
    }

    /// `Q^a = tanh(W2 tanh(W1 z + b1) + b2)`, a single `1×d` row.
    pub fn acoustic_query(&self, t: &mut Tape<'_>, z: Var) -> Result<Var> {
        let (l1, l2) = self
            .acoustic
            .ok_or_else(|| Error::invalid("acoustic_query", "aggregator has no acoustic query"))?;
        let h = l1.forward(t, z)?;
        let h = t.g.tanh(h);
        let q = l2.forward(t, h)?;
        Ok(t.g.tanh(q))
    }

    /// `Q^t + sigmoid(w)·Q^a`; `Q^a` broadcasts over positions.
    pub fn combine_queries(&self, t: &mut Tape<'_>, qt: Var, qa: Var) -> Result<Var> {
        let gate = self
            .gate
            .ok_or_else(|| Error::invalid("combine_queries", "aggregator has no gate"))?;
        let w = t.p(gate);
        let s = t.g.sigmoid(w);
        let scaled = t.g.mul(qa, s)?;
        t.g.add(qt, scaled)
    }

    /// The query for this aggregator's source. `z` is required for acoustic sources.
    pub fn query(&self, t: &mut Tape<'_>, layers: &[Var], z: Option<Var>) -> Result<Var> {
        let need_z = || z.ok_or_else(|| Error::invalid("aggregate", "acoustic query needs a latent"));
        match self.source {
            QuerySource::Textual => self.textual_query(t, layers),
            QuerySource::Acoustic => {
                let qa = self.acoustic_query(t, need_z()?)?;
                let n = t.g.shape(layers[0])[0];
                let zeros = t.constant(Tensor::zeros(&[n, self.d]));
                t.g.add(zeros, qa)
            }
            QuerySource::Combined => {
                let qt = self.textual_query(t, layers)?;
                let qa = self.acoustic_query(t, need_z()?)?;
                self.combine_queries(t, qt, qa)
            }
            QuerySource::None => unreachable!("rejected at construction"),
        }
    }

    /// Aggregates `layers` (`L + 1` matrices `N×d`) with query `q` (`N×d`).
    pub fn aggregate(&self, t: &mut Tape<'_>, layers: &[Var], q: Var) -> Result<Aggregated> {
        let top = *layers
            .last()
            .ok_or_else(|| Error::invalid("aggregate", "empty encoder stack"))?;
        let shape = t.g.shape(top).to_vec();
        if t.g.shape(q) != shape.as_slice() {
            return Err(Error::shape("aggregate", t.g.shape(q), &shape));
        }
        let n = shape[0];
        let stacked = t.g.concat(layers, 0)?;
        let keys = self.k.forward(t, stacked)?;
        let values = self.v.forward(t, stacked)?;
        let qp = self.q.forward(t, q)?;
        let entries = layers.len() + 1;
        let entry = |j: usize| j.min(layers.len() - 1);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctxs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.g.slice(qp, 1, h * dh, dh)?;
            let kh = t.g.slice(keys, 1, h * dh, dh)?;
            let vh = t.g.slice(values, 1, h * dh, dh)?;
            let mut k_rows = Vec::with_capacity(layers.len());
            let mut v_rows = Vec::with_capacity(layers.len());
            let mut logit_cols = Vec::with_capacity(entries);
            for l in 0..layers.len() {
                let kl = t.g.slice(kh, 0, l * n, n)?;
                k_rows.push(kl);
                v_rows.push(t.g.slice(vh, 0, l * n, n)?);
                let prod = t.g.mul(qh, kl)?;
                let dot = t.g.sum_axis(prod, 1)?;
                logit_cols.push(t.g.scale(dot, scale));
            }
            logit_cols.push(logit_cols[layers.len() - 1]);
            let logits = t.g.concat(&logit_cols, 1)?;
            let w = t.g.softmax(logits, 1)?;
            let mut ctx = None;
            for j in 0..entries {
                let wj = t.g.slice(w, 1, j, 1)?;
                let term = t.g.mul(v_rows[entry(j)], wj)?;
                ctx = Some(match ctx {
                    None => term,
                    Some(c) => t.g.add(c, term)?,
                });
            }
            ctxs.push(ctx.unwrap());
            weights.push(w);
        }
        let cat = t.g.concat(&ctxs, 1)?;
        let proj = self.o.forward(t, cat)?;
        let res = t.g.add(proj, top)?;
        let c = self.ln1.forward(t, res)?;
        let f = self.ff1.forward(t, c)?;
        let f = t.g.relu(f);
        let f = self.ff2.forward(t, f)?;
        let res = t.g.add(f, c)?;
        let output = self.ln2.forward(t, res)?;
        Ok(Aggregated { output, weights, query: q })
    }

    pub fn forward(&self, t: &mut Tape<'_>, layers: &[Var], z: Option<Var>) -> Result<Aggregated> {
        let q = self.query(t, layers, z)?;
        self.aggregate(t, layers, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn setup(source: QuerySource) -> (Aggregator, crate::nn::ParamSet) {
        let cfg = ModelConfig::default();
        let mut b = Builder::new(9);
        let a = Aggregator::new(&mut b, &cfg, source, 4).unwrap();
        (a, b.params)
    }

    fn stack(t: &mut Tape<'_>, n: usize, layers: usize, seed: f64) -> Vec<Var> {
        (0..layers)
            .map(|l| {
                let data = (0..n * 32).map(|i| ((i + 31 * l) as f64 * 0.71 + seed).sin()).collect();
                t.constant(Tensor::new(vec![n, 32], data).unwrap())
            })
            .collect()
    }

    #[test]
    fn weights_cover_l_plus_two_entries() {
        let (a, params) = setup(QuerySource::Textual);
        let mut t = Tape::new(Graph::default(), &params);
        let layers = stack(&mut t, 6, 4, 0.0);
        let out = a.forward(&mut t, &layers, None).unwrap();
        assert_eq!(t.g.shape(out.output), &[6, 32]);
        for w in &out.weights {
            assert_eq!(t.g.shape(*w), &[6, 5]);
            for r in 0..6 {
                let row = t.g.value(*w).row_slice(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                // the duplicated top layer gets the same weight twice
                assert_eq!(row[3], row[4]);
            }
        }
    }

    #[test]
    fn acoustic_query_broadcasts_and_needs_latent() {
        let (a, params) = setup(QuerySource::Combined);
        let mut t = Tape::new(Graph::default(), &params);
        let layers = stack(&mut t, 5, 4, 1.0);
        assert!(a.query(&mut t, &layers, None).is_err());
        let z = t.constant(Tensor::row(vec![0.3; 8]));
        let qa = a.acoustic_query(&mut t, z).unwrap();
        assert_eq!(t.g.shape(qa), &[1, 32]);
        let qt = a.textual_query(&mut t, &layers).unwrap();
        let qc = a.combine_queries(&mut t, qt, qa).unwrap();
        // gate initialised at w = 0 → Q^t + 0.5 Q^a
        for r in 0..5 {
            for c in 0..32 {
                let want = t.g.value(qt).row_slice(r)[c] + 0.5 * t.g.value(qa).data()[c];
                assert!((t.g.value(qc).row_slice(r)[c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_layers_give_identical_context_for_any_weights() {
        let (a, params) = setup(QuerySource::Textual);
        let mut t = Tape::new(Graph::default(), &params);
        let one = stack(&mut t, 3, 1, 2.0)[0];
        let layers = vec![one; 4];
        let q1 = t.constant(Tensor::full(&[3, 32], 0.1));
        let q2 = t.constant(Tensor::new(vec![3, 32], (0..96).map(|i| (i as f64).cos()).collect()).unwrap());
        let o1 = a.aggregate(&mut t, &layers, q1).unwrap().output;
        let o2 = a.aggregate(&mut t, &layers, q2).unwrap().output;
        for (x, y) in t.g.value(o1).data().iter().zip(t.g.value(o2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
