//! Finite-difference suites shared by the gradient tests and the acceptance run.

use emoagg::autodiff::{gradient_check_mode, Graph, Mode, Tensor, Var};
use emoagg::config::Variant;
use emoagg::exec::Exec;
use emoagg::model::Model;
use emoagg::train::batch_gradients;
use emoagg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{corpus, tiny};

pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;
const H: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random fixed weighting so every output element matters differently.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst relative error per checked operation.
#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    fn check_mode<F>(&mut self, name: &str, mode: Mode, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
    {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let err = gradient_check_mode(
                mode,
                |g, v| {
                    let y = f(g, v)?;
                    project(g, y, seed)
                },
                &inputs,
                H,
            )
            .unwrap();
            worst = worst.max(err);
        }
        self.results.push((name.to_string(), worst));
    }

    fn check<F>(&mut self, name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
    {
        self.check_mode(name, Mode::Eval, make, f)
    }

    pub fn failures(&self) -> Vec<&(String, f64)> {
        // NaN counts as a failure
        self.results.iter().filter(|(_, e)| e.is_nan() || *e >= OP_TOL).collect()
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.1).fold(0.0, f64::max)
    }
}

fn two(a: &'static [usize], b: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![rand_tensor(r, a, -1.0, 1.0), rand_tensor(r, b, -1.0, 1.0)]
}

fn one(a: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![rand_tensor(r, a, -1.0, 1.0)]
}

/// Every primitive.
pub fn all_ops(s: &mut Suite) {
    binary_ops(s);
    unary_ops(s);
    linear_algebra_ops(s);
    structural_ops(s);
    reduction_ops(s);
    layer_norm_op(s);
    convolution_ops(s);
    gru_cell_op(s);
    dropout_op(s);
    composite_chain(s);
}

pub fn binary_ops(s: &mut Suite) {
    s.check("add", two(&[3, 4], &[3, 4]), |g, v| g.add(v[0], v[1]));
    s.check("add broadcast", two(&[3, 4], &[1, 4]), |g, v| g.add(v[0], v[1]));
    s.check("sub broadcast", two(&[3, 1], &[3, 4]), |g, v| g.sub(v[0], v[1]));
    s.check("mul", two(&[2, 5], &[2, 5]), |g, v| g.mul(v[0], v[1]));
    s.check("mul broadcast", two(&[2, 5], &[2, 1]), |g, v| g.mul(v[0], v[1]));
    s.check(
        "div",
        |r| vec![rand_tensor(r, &[3, 3], -1.0, 1.0), rand_tensor(r, &[3, 3], 0.5, 2.0)],
        |g, v| g.div(v[0], v[1]),
    );
    s.check(
        "div broadcast",
        |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[1, 3], 0.5, 2.0)],
        |g, v| g.div(v[0], v[1]),
    );
}

pub fn unary_ops(s: &mut Suite) {
    s.check("neg", one(&[2, 3]), |g, v| Ok(g.neg(v[0])));
    s.check("tanh", one(&[2, 3]), |g, v| Ok(g.tanh(v[0])));
    s.check("sigmoid", one(&[2, 3]), |g, v| Ok(g.sigmoid(v[0])));
    // keep away from the kink
    s.check(
        "relu",
        |r| {
            let t = rand_tensor(r, &[2, 3], 0.1, 1.0);
            let signs: Vec<f64> = t.data().iter().enumerate().map(|(i, x)| if i % 2 == 0 { *x } else { -x }).collect();
            vec![Tensor::new(vec![2, 3], signs).unwrap()]
        },
        |g, v| Ok(g.relu(v[0])),
    );
    s.check("softplus", one(&[2, 3]), |g, v| Ok(g.softplus(v[0])));
    s.check("exp", one(&[2, 3]), |g, v| Ok(g.exp(v[0])));
    s.check("log", |r| vec![rand_tensor(r, &[2, 3], 0.3, 3.0)], |g, v| Ok(g.log(v[0])));
    s.check("sqrt", |r| vec![rand_tensor(r, &[2, 3], 0.3, 3.0)], |g, v| Ok(g.sqrt(v[0])));
    s.check("square", one(&[2, 3]), |g, v| Ok(g.square(v[0])));
    s.check("scale", one(&[2, 3]), |g, v| Ok(g.scale(v[0], -2.5)));
    s.check("add_scalar", one(&[2, 3]), |g, v| Ok(g.add_scalar(v[0], 0.7)));
}

pub fn linear_algebra_ops(s: &mut Suite) {
    s.check("matmul", two(&[3, 4], &[4, 2]), |g, v| g.matmul(v[0], v[1]));
    s.check(
        "linear",
        |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0), rand_tensor(r, &[2], -1.0, 1.0)],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
    s.check("linear no bias", two(&[1, 4], &[4, 5]), |g, v| g.linear(v[0], v[1], None));
    s.check("transpose", one(&[3, 2]), |g, v| g.transpose(v[0]));
    s.check("reshape", one(&[3, 4]), |g, v| g.reshape(v[0], &[2, 6]));
}

pub fn structural_ops(s: &mut Suite) {
    s.check("concat axis 0", two(&[2, 3], &[1, 3]), |g, v| g.concat(&[v[0], v[1], v[0]], 0));
    s.check("concat axis 1", two(&[2, 3], &[2, 2]), |g, v| g.concat(&[v[0], v[1]], 1));
    s.check("slice axis 0", one(&[4, 3]), |g, v| g.slice(v[0], 0, 1, 2));
    s.check("slice axis 1", one(&[4, 3]), |g, v| g.slice(v[0], 1, 2, 1));
    s.check("embedding", one(&[5, 3]), |g, v| g.embedding(v[0], &[4, 0, 4, 2]));
}

pub fn reduction_ops(s: &mut Suite) {
    for axis in 0..2 {
        s.check("softmax", one(&[3, 4]), move |g, v| g.softmax(v[0], axis));
        s.check("logsumexp", one(&[3, 4]), move |g, v| g.logsumexp(v[0], axis));
        s.check("sum_axis", one(&[3, 4]), move |g, v| g.sum_axis(v[0], axis));
        s.check("mean_axis", one(&[3, 4]), move |g, v| g.mean_axis(v[0], axis));
    }
    s.check("sum", one(&[3, 4]), |g, v| Ok(g.sum(v[0])));
    s.check("mean", one(&[3, 4]), |g, v| Ok(g.mean(v[0])));
}

pub fn layer_norm_op(s: &mut Suite) {
    s.check(
        "layer_norm",
        |r| vec![rand_tensor(r, &[3, 5], -2.0, 2.0), rand_tensor(r, &[5], 0.5, 1.5), rand_tensor(r, &[5], -0.5, 0.5)],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
}

pub fn convolution_ops(s: &mut Suite) {
    for stride in 1..3 {
        s.check(
            "conv1d",
            |r| vec![rand_tensor(r, &[5, 2], -1.0, 1.0), rand_tensor(r, &[3, 2, 3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
            move |g, v| g.conv1d(v[0], v[1], v[2], stride),
        );
        s.check(
            "conv2d",
            |r| vec![rand_tensor(r, &[2, 5, 4], -1.0, 1.0), rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
            move |g, v| g.conv2d(v[0], v[1], v[2], (stride, stride)),
        );
    }
}

pub fn gru_cell_op(s: &mut Suite) {
    s.check(
        "gru_cell",
        |r| {
            vec![
                rand_tensor(r, &[2, 3], -1.0, 1.0),
                rand_tensor(r, &[2, 4], -1.0, 1.0),
                rand_tensor(r, &[3, 12], -1.0, 1.0),
                rand_tensor(r, &[4, 12], -1.0, 1.0),
                rand_tensor(r, &[12], -1.0, 1.0),
                rand_tensor(r, &[12], -1.0, 1.0),
            ]
        },
        |g, v| g.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]),
    );
}

pub fn dropout_op(s: &mut Suite) {
    s.check_mode(
        "dropout",
        Mode::Train { seed: 9, step: 4 },
        one(&[4, 6]),
        |g, v| g.dropout(v[0], 0.5, 3, 1),
    );
}

pub fn composite_chain(s: &mut Suite) {
    // a value reused along several paths accumulates gradient correctly
    s.check("reuse", one(&[2, 3]), |g, v| {
        let a = g.tanh(v[0]);
        let b = g.mul(a, v[0])?;
        let c = g.softmax(b, 1)?;
        let d = g.add(c, a)?;
        let t = g.transpose(v[0])?;
        g.matmul(d, t)
    });
}

/// Worst relative error over `per_tensor` random coordinates of every parameter tensor.
pub fn end_to_end(variant: Variant, seed: u64, per_tensor: usize) -> (f64, String) {
    let cfg = tiny(variant, seed);
    let utts = corpus(&cfg);
    let mut model = Model::new(&cfg).unwrap();
    // zero-initialized biases meet zero decoder input exactly at the ReLU kink
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x1177);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += jitter.random_range(-0.05..0.05);
        }
    }
    let batch = [&utts[0], &utts[utts.len() - 1]];
    let step = 3;
    let (_, grads) = batch_gradients(&model, &batch, seed, step, Exec::Sequential).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (pi, g) in grads.iter().enumerate() {
        let n = model.params.tensors()[pi].numel();
        for _ in 0..per_tensor.min(n) {
            let j = rng.random_range(0..n);
            let orig = model.params.tensors()[pi].data()[j];
            let mut f = |v: f64| {
                model.params.tensors_mut()[pi].data_mut()[j] = v;
                batch_gradients(&model, &batch, seed, step, Exec::Sequential).unwrap().0.total
            };
            let numeric = (f(orig + h) - f(orig - h)) / (2.0 * h);
            model.params.tensors_mut()[pi].data_mut()[j] = orig;
            let a = g[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{}[{j}] analytic {a:e} numeric {numeric:e}", model.params.names()[pi]));
            }
        }
    }
    worst
}
