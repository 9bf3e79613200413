//! Independent reference implementations for the metric and latent checks.

use emoagg::autodiff::{Graph, Mode, Tensor};
use emoagg::metrics::{mcd, pearson, silhouette};
use emoagg::model::vae::{epsilon, reparameterize, sus_loss, LatentGaussian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLOOR: f64 = 1e-5;

/// MCD through Parseval: with every coefficient but `c_0` kept, the squared
/// cepstral distance equals that of the mean-removed log spectra.
pub fn mcd_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let centered = |row: &[f64]| {
        let l: Vec<f64> = row.iter().map(|v| (v.max(0.0) + FLOOR).ln()).collect();
        let m = l.iter().sum::<f64>() / l.len() as f64;
        l.into_iter().map(move |x| x - m)
    };
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        let d2: f64 = centered(ra).zip(centered(rb)).map(|(x, y)| (x - y).powi(2)).sum();
        total += 10.0 / 10f64.ln() * (2.0 * d2).sqrt();
    }
    total / a.len() as f64
}

pub fn silhouette_oracle(p: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d = |i: usize, j: usize| -> f64 { p[i].iter().zip(&p[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() };
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if same.is_empty() {
            continue;
        }
        let a = same.iter().map(|&j| d(i, j)).sum::<f64>() / same.len() as f64;
        let mut b = f64::INFINITY;
        for l in labels.iter().copied().filter(|&l| l != labels[i]) {
            let other: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
            b = b.min(other.iter().map(|&j| d(i, j)).sum::<f64>() / other.len() as f64);
        }
        if a.max(b) > 0.0 {
            s += (b - a) / a.max(b);
        }
    }
    s / n as f64
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn rows(rng: &mut ChaCha8Rng, frames: usize, bands: usize) -> Vec<Vec<f64>> {
    (0..frames).map(|_| (0..bands).map(|_| rng.random_range(-0.1..2.0)).collect()).collect()
}

fn tensor(r: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(r.len(), r[0].len(), r.concat()).unwrap()
}

/// Largest disagreement with the Parseval oracle over 20 random instances.
pub fn worst_mcd_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.random_range(1..6);
        let bands = rng.random_range(2..5);
        let (a, b) = (rows(&mut rng, frames, bands), rows(&mut rng, frames, bands));
        let got = mcd(&tensor(&a), &tensor(&b), bands - 1).unwrap();
        worst = worst.max((got - mcd_oracle(&a, &b)).abs());
    }
    worst
}

pub fn worst_silhouette_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=20);
        let dim = rng.random_range(1..4);
        let p: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        labels[0] = 7;
        let got = silhouette(&p, &labels).unwrap();
        worst = worst.max((got - silhouette_oracle(&p, &labels)).abs());
    }
    worst
}

pub fn worst_pearson_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.random_range(-2.0..2.0)).collect();
        let got = pearson(&x, &y).unwrap();
        worst = worst.max((got - pearson_oracle(&x, &y)).abs());
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Final `‖μ‖` after 1000 plain gradient steps (lr 0.05) on the SUS loss alone.
pub fn sus_descent(start_norm: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k = start_norm / norm(&dir);
    let mut mu: Vec<f64> = dir.iter().map(|x| x * k).collect();
    for _ in 0..1000 {
        let mut g = Graph::new(Mode::Eval);
        let m = g.param(Tensor::row(mu.clone()));
        let l = sus_loss(&mut g, m);
        let grads = g.backward(l).unwrap();
        for (x, d) in mu.iter_mut().zip(grads.get(m).unwrap()) {
            *x -= 0.05 * d;
        }
    }
    norm(&mu)
}

pub fn sus_value(mu: &[f64]) -> f64 {
    let mut g = Graph::new(Mode::Eval);
    let m = g.constant(Tensor::row(mu.to_vec()));
    let l = sus_loss(&mut g, m);
    g.value(l).item()
}

/// Per-dimension mean and standard deviation of `z − μ`.
pub fn reparam_stats(mu: &[f64], log_var: Option<f64>, sigma: f64, n: u64) -> (Vec<f64>, Vec<f64>) {
    let dim = mu.len();
    let (mut s1, mut s2) = (vec![0.0; dim], vec![0.0; dim]);
    for i in 0..n {
        let mut g = Graph::new(Mode::Eval);
        let m = g.constant(Tensor::row(mu.to_vec()));
        let lv = log_var.map(|v| g.constant(Tensor::row(vec![v; dim])));
        let lat = LatentGaussian {
            mu: m,
            log_var: lv,
            sigma_const: sigma,
        };
        let z = reparameterize(&mut g, &lat, &epsilon(5, i, 0, dim)).unwrap();
        for (d, v) in g.value(z).data().iter().enumerate() {
            let e = v - mu[d];
            s1[d] += e;
            s2[d] += e * e;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = s1.iter().map(|s| s / nf).collect();
    let std = s2.iter().zip(&mean).map(|(s, m)| (s / nf - m * m).sqrt()).collect();
    (mean, std)
}

