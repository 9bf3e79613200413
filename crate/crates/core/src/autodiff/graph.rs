//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its value and the recipe needed to
//! push gradients back to its inputs. Node creation order is a topological
//! order, so `backward` walks the node list once from the end.

use super::kernels::{self, axis_split, broadcast_index_map, broadcast_shape, sigmoid, softplus};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Scale(f64),
    AddScalar(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
        }
    }

    /// d y / d x given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Gru {
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        /// r, z, n, and the recurrent candidate pre-activation, each m×H.
        cache: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v` as a tensor; zeros when the loss does not depend on it.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let n = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

/// Dropout behaviour of a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

/// A single-threaded tape of tensor operations.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Mode::Eval)
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::invalid(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

fn acc(dst: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; n])
}

fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
            let ma = broadcast_index_map(&shape, ta.shape());
            let mb = broadcast_index_map(&shape, tb.shape());
            let (da, db) = (ta.data(), tb.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::Unary(kind, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), x)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = dims2("linear", self.value(x))?;
        let (k2, n) = dims2("linear", self.value(w))?;
        if k != k2 {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.numel() != n {
                return Err(Error::shape("linear bias", bt.shape(), &[n]));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bt.data());
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), m, k, n, &mut out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Linear { x, w, b }, &inputs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x]))
    }

    // ---- reductions --------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {s:?}")));
        }
        Ok(axis_split(s, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", x, axis)?;
        if len == 0 {
            return Err(Error::invalid("softmax", "empty axis"));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// `log Σ exp(x)` along `axis`, keeping the axis with extent 1.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("logsumexp", x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|j| (d[at(j)] - mx).exp()).sum();
                out[o * inner + i] = mx + s.ln();
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSumExp { x, axis }, &[x]))
    }

    /// Sum along `axis`, keeping the axis with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("sum", x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.check_axis("mean", x, axis)?.1;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- structured ops ----------------------------------------------

    /// Normalizes over the last axis then applies `gain` and `bias`.
    /// Variance is floored at `1e-8` so constant rows stay finite.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const VAR_FLOOR: f64 = 1e-8;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", &shape, tg.shape()));
        }
        let rows = self.value(x).numel() / d;
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut floored = vec![false; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            floored[r] = var < VAR_FLOOR;
            let is = 1.0 / var.max(VAR_FLOOR).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
            floored,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[x, gain, bias]))
    }

    /// Row lookup: `table: V×d`, output `ids.len()×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("embedding", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid("embedding", format!("id {bad} outside vocabulary of {v}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![ids.len(), d], out), op, &[table]))
    }

    /// 1-D convolution over rows with same padding.
    /// `x: N×Cin`, `w: K×Cin×Cout`, `b: Cout`; output `ceil(N/stride)×Cout`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (n, cin) = dims2("conv1d", self.value(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || stride == 0 {
            return Err(Error::shape("conv1d", self.shape(x), &ws));
        }
        let (k, cout) = (ws[0], ws[2]);
        if self.value(b).numel() != cout {
            return Err(Error::shape("conv1d bias", self.shape(b), &[cout]));
        }
        let (nout, pad) = same_padding(n, k, stride);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; nout * cout];
        for o in 0..nout {
            let orow = &mut out[o * cout..(o + 1) * cout];
            orow.copy_from_slice(bd);
            for kk in 0..k {
                let pos = (o * stride + kk) as isize - pad as isize;
                if pos < 0 || pos as usize >= n {
                    continue;
                }
                let xrow = &xd[pos as usize * cin..(pos as usize + 1) * cin];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(kk * cin + i) * cout..(kk * cin + i + 1) * cout];
                    for (ov, &wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let op = Op::Conv1d {
            x,
            w,
            b,
            stride,
            pad,
        };
        Ok(self.push(Tensor::from_parts(vec![nout, cout], out), op, &[x, w, b]))
    }

    /// 2-D convolution with same padding.
    /// `x: Cin×H×W`, `w: Cout×Cin×KH×KW`, `b: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (cin, h, wd_) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.value(b).numel() != cout {
            return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
        }
        let (ho, ph) = same_padding(h, kh, stride.0);
        let (wo, pw) = same_padding(wd_, kw, stride.1);
        let (xd, wt, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = bd[co];
                    for ci in 0..cin {
                        for a in 0..kh {
                            let ih = (oh * stride.0 + a) as isize - ph as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for c in 0..kw {
                                let iw = (ow * stride.1 + c) as isize - pw as isize;
                                if iw < 0 || iw as usize >= wd_ {
                                    continue;
                                }
                                s += xd[(ci * h + ih as usize) * wd_ + iw as usize]
                                    * wt[((co * cin + ci) * kh + a) * kw + c];
                            }
                        }
                    }
                    out[(co * ho + oh) * wo + ow] = s;
                }
            }
        }
        let op = Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad: (ph, pw),
        };
        Ok(self.push(Tensor::from_parts(vec![cout, ho, wo], out), op, &[x, w, b]))
    }

    /// One GRU step for `m` rows. Gate column order in the weights is
    /// reset, update, candidate.
    /// `x: m×In`, `h: m×H`, `w_ih: In×3H`, `w_hh: H×3H`, biases `3H`.
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var> {
        let (m, input) = dims2("gru_cell", self.value(x))?;
        let (mh, hid) = dims2("gru_cell", self.value(h))?;
        if mh != m {
            return Err(Error::shape("gru_cell", self.shape(x), self.shape(h)));
        }
        let g3 = 3 * hid;
        if self.shape(w_ih) != [input, g3] {
            return Err(Error::shape("gru_cell w_ih", self.shape(w_ih), &[input, g3]));
        }
        if self.shape(w_hh) != [hid, g3] {
            return Err(Error::shape("gru_cell w_hh", self.shape(w_hh), &[hid, g3]));
        }
        if self.value(b_ih).numel() != g3 || self.value(b_hh).numel() != g3 {
            return Err(Error::shape("gru_cell bias", self.shape(b_ih), &[g3]));
        }
        let mut gi = vec![0.0; m * g3];
        let mut gh = vec![0.0; m * g3];
        for r in 0..m {
            gi[r * g3..(r + 1) * g3].copy_from_slice(self.value(b_ih).data());
            gh[r * g3..(r + 1) * g3].copy_from_slice(self.value(b_hh).data());
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w_ih).data(), m, input, g3, &mut gi);
        kernels::matmul_acc(self.value(h).data(), self.value(w_hh).data(), m, hid, g3, &mut gh);
        let hd = self.value(h).data();
        let mut cache = vec![0.0; 4 * m * hid];
        let mut out = vec![0.0; m * hid];
        let mh_ = m * hid;
        for row in 0..m {
            for j in 0..hid {
                let b = row * g3;
                let r = sigmoid(gi[b + j] + gh[b + j]);
                let z = sigmoid(gi[b + hid + j] + gh[b + hid + j]);
                let hn = gh[b + 2 * hid + j];
                let n = (gi[b + 2 * hid + j] + r * hn).tanh();
                let k = row * hid + j;
                cache[k] = r;
                cache[mh_ + k] = z;
                cache[2 * mh_ + k] = n;
                cache[3 * mh_ + k] = hn;
                out[k] = (1.0 - z) * n + z * hd[k];
            }
        }
        let op = Op::Gru {
            x,
            h,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            cache,
        };
        Ok(self.push(
            Tensor::from_parts(vec![m, hid], out),
            op,
            &[x, h, w_ih, w_hh, b_ih, b_hh],
        ))
    }

    /// Inverted dropout. The mask is a pure function of
    /// (graph seed, `layer`, graph step, `slot`, element index); identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64, layer: u64, slot: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let (seed, step) = match self.mode {
            Mode::Train { seed, step } if rate > 0.0 => (seed, step),
            _ => return Ok(x),
        };
        let key = kernels::mix64(
            kernels::mix64(kernels::mix64(seed ^ 0xD50F) ^ layer.wrapping_mul(0x9E37))
                ^ kernels::mix64(step)
                ^ slot.wrapping_mul(0xA24B_AED4_963E_E407),
        );
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel() as u64)
            .map(|i| {
                if kernels::unit_uniform(key ^ kernels::mix64(i)) < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients from multiple uses of a
    /// node accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let n_nodes = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n_nodes).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let same = ta.shape() == tb.shape();
                let (ma, mb) = if same {
                    (None, None)
                } else {
                    (
                        Some(broadcast_index_map(out.shape(), ta.shape())),
                        Some(broadcast_index_map(out.shape(), tb.shape())),
                    )
                };
                let ia = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                let ib = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                let (da, db) = (ta.data(), tb.data());
                if self.wants(*a) {
                    let ga = acc(&mut grads[a.0], da.len());
                    for (k, &gk) in g.iter().enumerate() {
                        ga[ia(k)] += match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * db[ib(k)],
                            Binary::Div => gk / db[ib(k)],
                        };
                    }
                }
                if self.wants(*b) {
                    let gb = acc(&mut grads[b.0], db.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let y = db[ib(k)];
                        gb[ib(k)] += match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * da[ia(k)],
                            Binary::Div => -gk * da[ia(k)] / (y * y),
                        };
                    }
                }
            }
            Op::Unary(kind, x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let gx = acc(&mut grads[x.0], xd.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * kind.derivative(xd[k], out.data()[k]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = out.shape()[1];
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    kernels::matmul_a_bt_acc(g, bd, m, k, n, acc(&mut grads[a.0], m * k));
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    kernels::matmul_at_b_acc(ad, g, m, k, n, acc(&mut grads[b.0], k * n));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2().unwrap();
                let n = out.shape()[1];
                if self.wants(*x) {
                    let wd = self.value(*w).data();
                    kernels::matmul_a_bt_acc(g, wd, m, k, n, acc(&mut grads[x.0], m * k));
                }
                if self.wants(*w) {
                    let xd = self.value(*x).data();
                    kernels::matmul_at_b_acc(xd, g, m, k, n, acc(&mut grads[w.0], k * n));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        kernels::col_sum_acc(g, n, acc(&mut grads[b.0], n));
                    }
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).dims2().unwrap();
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let gp = acc(&mut grads[p.0], outer * len * inner);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for q in 0..len * inner {
                                gp[dst + q] += g[src + q];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                    let len = out.shape()[*axis];
                    let gx = acc(&mut grads[x.0], outer * full * inner);
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for q in 0..len * inner {
                            gx[dst + q] += g[src + q];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    let gx = acc(&mut grads[x.0], y.len());
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSumExp { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                    let xd = self.value(*x).data();
                    let y = out.data();
                    let gx = acc(&mut grads[x.0], xd.len());
                    for o in 0..outer {
                        for ii in 0..inner {
                            let r = o * inner + ii;
                            for j in 0..len {
                                let at = o * len * inner + j * inner + ii;
                                gx[at] += g[r] * (xd[at] - y[r]).exp();
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                    let gx = acc(&mut grads[x.0], outer * len * inner);
                    for o in 0..outer {
                        for j in 0..len {
                            for ii in 0..inner {
                                gx[o * len * inner + j * inner + ii] += g[o * inner + ii];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let n = self.numel(*x);
                    for v in acc(&mut grads[x.0], n).iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                floored,
            } => {
                let d = *out.shape().last().unwrap();
                let rows = inv_std.len();
                let gd = self.value(*gain).data();
                if self.wants(*x) {
                    let gx = acc(&mut grads[x.0], rows * d);
                    let mut gh = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gh[j] = g[r * d + j] * gd[j];
                        }
                        let mean_g = gh.iter().sum::<f64>() / d as f64;
                        let mean_gx = if floored[r] {
                            0.0
                        } else {
                            kernels::dot(&gh, xh) / d as f64
                        };
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (gh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
                if self.wants(*gain) {
                    let gg = acc(&mut grads[gain.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    kernels::col_sum_acc(g, d, acc(&mut grads[bias.0], d));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = out.shape()[1];
                    let gt = acc(&mut grads[table.0], self.numel(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, cin) = self.value(*x).dims2().unwrap();
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[2]);
                let nout = out.shape()[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (wx, ww) = (self.wants(*x), self.wants(*w));
                let mut gx = if wx { grads[x.0].take().or(Some(vec![0.0; n * cin])) } else { None };
                let mut gw = if ww { grads[w.0].take().or(Some(vec![0.0; k * cin * cout])) } else { None };
                for o in 0..nout {
                    let grow = &g[o * cout..(o + 1) * cout];
                    for kk in 0..k {
                        let pos = (o * stride + kk) as isize - *pad as isize;
                        if pos < 0 || pos as usize >= n {
                            continue;
                        }
                        let p = pos as usize;
                        for i in 0..cin {
                            let widx = (kk * cin + i) * cout;
                            if let Some(gx) = gx.as_mut() {
                                gx[p * cin + i] += kernels::dot(grow, &wd[widx..widx + cout]);
                            }
                            if let Some(gw) = gw.as_mut() {
                                let xv = xd[p * cin + i];
                                for c in 0..cout {
                                    gw[widx + c] += xv * grow[c];
                                }
                            }
                        }
                    }
                }
                if wx {
                    grads[x.0] = gx;
                }
                if ww {
                    grads[w.0] = gw;
                }
                if self.wants(*b) {
                    kernels::col_sum_acc(g, cout, acc(&mut grads[b.0], cout));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x);
                let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let (xd, wt) = (self.value(*x).data(), self.value(*w).data());
                let (wx, ww) = (self.wants(*x), self.wants(*w));
                let mut gx = if wx { grads[x.0].take().or(Some(vec![0.0; xd.len()])) } else { None };
                let mut gw = if ww { grads[w.0].take().or(Some(vec![0.0; wt.len()])) } else { None };
                for co in 0..cout {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let go = g[(co * ho + oh) * wo + ow];
                            for ci in 0..cin {
                                for a in 0..kh {
                                    let ih = (oh * stride.0 + a) as isize - pad.0 as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    for c in 0..kw {
                                        let iw = (ow * stride.1 + c) as isize - pad.1 as isize;
                                        if iw < 0 || iw as usize >= wdt {
                                            continue;
                                        }
                                        let xi = (ci * h + ih as usize) * wdt + iw as usize;
                                        let wi = ((co * cin + ci) * kh + a) * kw + c;
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xi] += go * wt[wi];
                                        }
                                        if let Some(gw) = gw.as_mut() {
                                            gw[wi] += go * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if wx {
                    grads[x.0] = gx;
                }
                if ww {
                    grads[w.0] = gw;
                }
                if self.wants(*b) {
                    let gb = acc(&mut grads[b.0], cout);
                    for co in 0..cout {
                        gb[co] += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                    }
                }
            }
            Op::Gru {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                cache,
            } => {
                let (m, input) = self.value(*x).dims2().unwrap();
                let hid = out.shape()[1];
                let g3 = 3 * hid;
                let mh = m * hid;
                let hd = self.value(*h).data();
                let mut dgi = vec![0.0; m * g3];
                let mut dgh = vec![0.0; m * g3];
                let mut dh_direct = vec![0.0; mh];
                for row in 0..m {
                    for j in 0..hid {
                        let k = row * hid + j;
                        let (r, z, n, hn) = (cache[k], cache[mh + k], cache[2 * mh + k], cache[3 * mh + k]);
                        let gk = g[k];
                        let dn = gk * (1.0 - z);
                        let dz = gk * (hd[k] - n);
                        dh_direct[k] = gk * z;
                        let dn_pre = dn * (1.0 - n * n);
                        let dr_pre = dn_pre * hn * r * (1.0 - r);
                        let dz_pre = dz * z * (1.0 - z);
                        let b = row * g3;
                        dgi[b + j] = dr_pre;
                        dgh[b + j] = dr_pre;
                        dgi[b + hid + j] = dz_pre;
                        dgh[b + hid + j] = dz_pre;
                        dgi[b + 2 * hid + j] = dn_pre;
                        dgh[b + 2 * hid + j] = dn_pre * r;
                    }
                }
                if self.wants(*x) {
                    let wd = self.value(*w_ih).data();
                    kernels::matmul_a_bt_acc(&dgi, wd, m, input, g3, acc(&mut grads[x.0], m * input));
                }
                if self.wants(*w_ih) {
                    let xd = self.value(*x).data();
                    kernels::matmul_at_b_acc(xd, &dgi, m, input, g3, acc(&mut grads[w_ih.0], input * g3));
                }
                if self.wants(*b_ih) {
                    kernels::col_sum_acc(&dgi, g3, acc(&mut grads[b_ih.0], g3));
                }
                if self.wants(*h) {
                    let wd = self.value(*w_hh).data();
                    let gh = acc(&mut grads[h.0], mh);
                    for (a, b) in gh.iter_mut().zip(&dh_direct) {
                        *a += b;
                    }
                    kernels::matmul_a_bt_acc(&dgh, wd, m, hid, g3, gh);
                }
                if self.wants(*w_hh) {
                    kernels::matmul_at_b_acc(hd, &dgh, m, hid, g3, acc(&mut grads[w_hh.0], hid * g3));
                }
                if self.wants(*b_hh) {
                    kernels::col_sum_acc(&dgh, g3, acc(&mut grads[b_hh.0], g3));
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let gx = acc(&mut grads[x.0], mask.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * mask[k];
                    }
                }
            }
        }
    }
}
