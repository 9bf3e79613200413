//! Reference encoder and utterance-level emotion latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::kernels::mix64;
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{ModelConfig, Regularizer};
use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::nn::{Builder, Gru, Linear, ParamId, Tape};

const SUS_EPS: f64 = 1e-30;

/// Latent for one utterance, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    /// Present only with the KL regularizer.
    pub log_var: Option<Var>,
    pub sigma_const: f64,
}

#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    convs: Vec<(ParamId, ParamId)>,
    gru: Gru,
    mu: Linear,
    log_var: Option<Linear>,
    sigma_const: f64,
    bands_out: usize,
}

fn conv_out(len: usize, layers: usize) -> usize {
    (0..layers).fold(len, |l, _| l.div_ceil(2))
}

impl ReferenceEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, bands: usize, reg: Regularizer) -> Result<Self> {
        b.scope("vae", |b| {
            let mut cin = 1;
            let mut convs = Vec::new();
            for (i, &c) in cfg.ref_channels.iter().enumerate() {
                convs.push(b.scope(&format!("conv{i}"), |b| {
                    Ok((b.xavier("w", &[c, cin, 3, 3], cin * 9, c * 9)?, b.constant("b", &[c], 0.0)?))
                })?);
                cin = c;
            }
            let bands_out = conv_out(bands, convs.len());
            let gru = b.gru("gru", cin * bands_out, cfg.ref_gru)?;
            let mu = b.linear("mu", cfg.ref_gru, cfg.latent_dim)?;
            let log_var = match reg {
                Regularizer::Kl => Some(b.linear("log_var", cfg.ref_gru, cfg.latent_dim)?),
                Regularizer::Sus => None,
            };
            Ok(ReferenceEncoder {
                convs,
                gru,
                mu,
                log_var,
                sigma_const: cfg.sigma_const,
                bands_out,
            })
        })
    }

    /// Encodes a `T×B` mel into `μ` (and `log σ²` in KL mode), each `1×latent`.
    pub fn encode(&self, t: &mut Tape<'_>, mel: Var) -> Result<LatentGaussian> {
        let shape = t.g.shape(mel).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::invalid("reference_encode", format!("mel must be T×B with T ≥ 1, got {shape:?}")));
        }
        let (frames, bands) = (shape[0], shape[1]);
        let mut x = t.g.reshape(mel, &[1, frames, bands])?;
        for (w, b) in &self.convs {
            let (wv, bv) = (t.p(*w), t.p(*b));
            let c = t.g.conv2d(x, wv, bv, (2, 2))?;
            x = t.g.relu(c);
        }
        let s = t.g.shape(x).to_vec();
        let (ch, steps, bo) = (s[0], s[1], s[2]);
        debug_assert_eq!(bo, self.bands_out);
        // channel-major C×T'×B' → T'×(C·B')
        let flat = t.g.reshape(x, &[ch, steps * bo])?;
        let per_channel = (0..ch)
            .map(|c| {
                let row = t.g.slice(flat, 0, c, 1)?;
                t.g.reshape(row, &[steps, bo])
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = t.g.concat(&per_channel, 1)?;
        let mut h = t.constant(Tensor::zeros(&[1, self.gru.hidden]));
        for step in 0..steps {
            let xi = t.g.slice(seq, 0, step, 1)?;
            h = self.gru.step(t, xi, h)?;
        }
        let mu = self.mu.forward(t, h)?;
        let log_var = match &self.log_var {
            Some(l) => Some(l.forward(t, h)?),
            None => None,
        };
        Ok(LatentGaussian {
            mu,
            log_var,
            sigma_const: self.sigma_const,
        })
    }
}

/// `(sqrt(Σ μ² + 1e-30) − 1)²`.
pub fn sus_loss(g: &mut Graph, mu: Var) -> Var {
    let sq = g.square(mu);
    let s = g.sum(sq);
    let s = g.add_scalar(s, SUS_EPS);
    let norm = g.sqrt(s);
    let d = g.add_scalar(norm, -1.0);
    g.square(d)
}

/// `0.5 · Σ (μ² + exp(log σ²) − 1 − log σ²)`.
pub fn kl_loss(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let ev = g.exp(log_var);
    let a = g.add(m2, ev)?;
    let a = g.sub(a, log_var)?;
    let a = g.add_scalar(a, -1.0);
    let s = g.sum(a);
    Ok(g.scale(s, 0.5))
}

/// `z = μ + σ·ε`, with `σ` constant (SUS) or `exp(0.5·log σ²)` (KL).
pub fn reparameterize(g: &mut Graph, latent: &LatentGaussian, eps: &Tensor) -> Result<Var> {
    if g.shape(latent.mu) != eps.shape() {
        return Err(Error::shape("reparameterize", g.shape(latent.mu), eps.shape()));
    }
    let e = g.constant(eps.clone());
    let noise = match latent.log_var {
        Some(lv) => {
            let half = g.scale(lv, 0.5);
            let sigma = g.exp(half);
            g.mul(sigma, e)?
        }
        None => g.scale(e, latent.sigma_const),
    };
    g.add(latent.mu, noise)
}

/// Standard-normal `1×dim` noise keyed by (seed, step, slot).
pub fn epsilon(seed: u64, step: u64, slot: u64, dim: usize) -> Tensor {
    let key = mix64(mix64(seed ^ 0xE95) ^ mix64(step.wrapping_add(0x51)) ^ slot.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Tensor::row((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

#[derive(Clone, Debug)]
pub struct EmotionClassifier {
    hidden: Linear,
    out: Linear,
}

impl EmotionClassifier {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        b.scope("classifier", |b| {
            Ok(EmotionClassifier {
                hidden: b.linear("hidden", cfg.latent_dim, cfg.cls_hidden)?,
                out: b.linear("out", cfg.cls_hidden, NUM_EMOTIONS)?,
            })
        })
    }

    /// `1×7` logits.
    pub fn logits(&self, t: &mut Tape<'_>, z: Var) -> Result<Var> {
        let h = self.hidden.forward(t, z)?;
        let h = t.g.relu(h);
        self.out.forward(t, h)
    }
}

/// `−log softmax(logits)[label]` for `1×C` logits.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let classes = g.shape(logits)[1];
    if label >= classes {
        return Err(Error::invalid("cross_entropy", format!("label {label} outside 0..{classes}")));
    }
    let lse = g.logsumexp(logits, 1)?;
    let picked = g.slice(logits, 1, label, 1)?;
    let d = g.sub(lse, picked)?;
    Ok(g.sum(d))
}

/// Per-emotion mean of `μ`, indexed by emotion.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionCentroids(pub Vec<Vec<f64>>);

impl EmotionCentroids {
    pub fn get(&self, e: Emotion) -> &[f64] {
        &self.0[e.index()]
    }
}

pub fn emotion_centroids(mus: &[Vec<f64>], labels: &[Emotion]) -> Result<EmotionCentroids> {
    if mus.len() != labels.len() || mus.is_empty() {
        return Err(Error::shape("emotion_centroids", &[mus.len()], &[labels.len()]));
    }
    let dim = mus[0].len();
    let mut sums = vec![vec![0.0; dim]; NUM_EMOTIONS];
    let mut counts = [0usize; NUM_EMOTIONS];
    for (m, e) in mus.iter().zip(labels) {
        counts[e.index()] += 1;
        for (s, v) in sums[e.index()].iter_mut().zip(m) {
            *s += v;
        }
    }
    let missing: Vec<String> = Emotion::ALL
        .iter()
        .filter(|e| counts[e.index()] == 0)
        .map(|e| e.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingEmotion(missing));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(EmotionCentroids(sums))
}
