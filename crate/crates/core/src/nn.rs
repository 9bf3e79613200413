//! Named parameters and the small layer wrappers the model is built from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Parameter tensors in creation order, addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid("ParamSet::add", format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, requiring identical names and shapes.
    pub fn load_from(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() {
            let missing: Vec<&String> = self.names.iter().filter(|n| !names.contains(n)).collect();
            let extra: Vec<&String> = names.iter().filter(|n| !self.index.contains_key(*n)).collect();
            return Err(Error::ParamMismatch(format!("missing {missing:?}, unexpected {extra:?}")));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// A graph plus lazily bound parameter leaves.
pub struct Tape<'p> {
    pub g: Graph,
    params: &'p ParamSet,
    vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(g: Graph, params: &'p ParamSet) -> Self {
        Tape {
            g,
            params,
            vars: vec![None; params.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.g.param(self.params.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Gradients for every parameter in set order; unused ones are zero.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(v, t)| match v {
                Some(v) => grads.take(*v),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }
}

/// Creates parameters under a name prefix with seeded Xavier-uniform init.
pub struct Builder {
    pub params: ParamSet,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.params.add(&self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.params.add(&self.full_name(name), Tensor::full(shape, value))
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        self.scope(name, |b| {
            Ok(Linear {
                w: b.xavier("w", &[input, output], input, output)?,
                b: b.constant("b", &[output], 0.0)?,
            })
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        self.scope(name, |b| {
            Ok(LayerNorm {
                gain: b.constant("gain", &[dim], 1.0)?,
                bias: b.constant("bias", &[dim], 0.0)?,
            })
        })
    }

    pub fn gru(&mut self, name: &str, input: usize, hidden: usize) -> Result<Gru> {
        self.scope(name, |b| {
            Ok(Gru {
                w_ih: b.xavier("w_ih", &[input, 3 * hidden], input, hidden)?,
                w_hh: b.xavier("w_hh", &[hidden, 3 * hidden], hidden, hidden)?,
                b_ih: b.constant("b_ih", &[3 * hidden], 0.0)?,
                b_hh: b.constant("b_hh", &[3 * hidden], 0.0)?,
                hidden,
            })
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (t.p(self.w), t.p(self.b));
        t.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (t.p(self.gain), t.p(self.bias));
        t.g.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn step(&self, t: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let (wi, wh, bi, bh) = (t.p(self.w_ih), t.p(self.w_hh), t.p(self.b_ih), t.p(self.b_hh));
        t.g.gru_cell(x, h, wi, wh, bi, bh)
    }
}
