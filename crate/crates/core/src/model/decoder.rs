//! Autoregressive frame decoder with GMM location attention.

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, Gru, Linear, Tape};

// softplus(-0.94) ≈ 0.33 positions per frame, softplus(0.54) ≈ 1.0
const DELTA_BIAS: f64 = -0.94;
const SIGMA_BIAS: f64 = 0.54;
const PRENET_LAYER_KEY: u64 = 0x7E_0000;

#[derive(Clone, Debug)]
pub struct Decoder {
    mixtures: usize,
    bands: usize,
    d: usize,
    dropout: f64,
    memory_z: Linear,
    prenet1: Linear,
    prenet2: Linear,
    gru1: Gru,
    att_hidden: Linear,
    att_params: Linear,
    gru2: Gru,
    frame: Linear,
    stop: Linear,
}

/// Recurrent state carried between decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h1: Var,
    pub h2: Var,
    pub context: Var,
    /// `K×1` mixture means in position units.
    pub means: Var,
}

pub struct StepOutput {
    pub frame: Var,
    pub stop_logit: Var,
    /// `1×N` position weights.
    pub weights: Var,
    pub state: DecoderState,
}

pub struct Decoded {
    /// `T×B`.
    pub frames: Var,
    /// `T×1`.
    pub stop_logits: Var,
    pub weights: Vec<Var>,
    pub means: Vec<Var>,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, bands: usize) -> Result<Self> {
        let d = cfg.d_model;
        let k = cfg.gmm_mixtures;
        let dec = b.scope("decoder", |b| {
            Ok(Decoder {
                mixtures: k,
                bands,
                d,
                dropout: cfg.dec_dropout,
                memory_z: b.linear("memory_z", cfg.latent_dim, d)?,
                prenet1: b.linear("prenet1", bands, cfg.dec_prenet)?,
                prenet2: b.linear("prenet2", cfg.dec_prenet, cfg.dec_prenet)?,
                gru1: b.gru("gru1", cfg.dec_prenet + d, cfg.dec_gru)?,
                att_hidden: b.linear("att_hidden", cfg.dec_gru, cfg.gmm_hidden)?,
                att_params: b.linear("att_params", cfg.gmm_hidden, 3 * k)?,
                gru2: b.gru("gru2", cfg.dec_gru + d, cfg.dec_gru)?,
                frame: b.linear("frame", cfg.dec_gru + d, bands)?,
                stop: b.linear("stop", cfg.dec_gru + d, 1)?,
            })
        })?;
        let bias = b.params.get_mut(dec.att_params.b).data_mut();
        bias[k..2 * k].fill(DELTA_BIAS);
        bias[2 * k..].fill(SIGMA_BIAS);
        Ok(dec)
    }

    pub fn stop_bias(&self) -> crate::nn::ParamId {
        self.stop.b
    }

    /// Encoder output plus a projection of `z` broadcast to every position.
    pub fn memory(&self, t: &mut Tape<'_>, encoded: Var, z: Var) -> Result<Var> {
        let zp = self.memory_z.forward(t, z)?;
        t.g.add(encoded, zp)
    }

    pub fn initial_state(&self, t: &mut Tape<'_>) -> DecoderState {
        let h = self.gru1.hidden;
        DecoderState {
            h1: t.constant(Tensor::zeros(&[1, h])),
            h2: t.constant(Tensor::zeros(&[1, h])),
            context: t.constant(Tensor::zeros(&[1, self.d])),
            means: t.constant(Tensor::zeros(&[self.mixtures, 1])),
        }
    }

    /// One attention update: returns `1×N` position weights and new `K×1` means.
    ///
    /// `w(j) ∝ Σ_k softmax(ω̂)_k · exp(−(j − μ_k)² / (2 σ_k²))`, evaluated in
    /// log space and renormalized over the `N` positions.
    pub fn gmm_attention_step(&self, t: &mut Tape<'_>, query: Var, means: Var, memory_len: usize) -> Result<(Var, Var)> {
        if memory_len == 0 {
            return Err(Error::invalid("gmm_attention", "empty memory"));
        }
        let k = self.mixtures;
        let h = self.att_hidden.forward(t, query)?;
        let h = t.g.tanh(h);
        let p = self.att_params.forward(t, h)?;
        let p = t.g.transpose(p)?; // 3K×1
        let omega = t.g.slice(p, 0, 0, k)?;
        let delta = t.g.slice(p, 0, k, k)?;
        let sigma_hat = t.g.slice(p, 0, 2 * k, k)?;
        let step = t.g.softplus(delta);
        let new_means = t.g.add(means, step)?;
        let sigma = t.g.softplus(sigma_hat);
        let lse = t.g.logsumexp(omega, 0)?;
        let log_w = t.g.sub(omega, lse)?;
        let pos = t.constant(Tensor::row((0..memory_len).map(|j| j as f64).collect()));
        let diff = t.g.sub(pos, new_means)?; // K×N
        let sq = t.g.square(diff);
        let var2 = t.g.square(sigma);
        let var2 = t.g.scale(var2, 2.0);
        let expo = t.g.div(sq, var2)?;
        let comp = t.g.sub(log_w, expo)?;
        let mix = t.g.logsumexp(comp, 0)?; // 1×N
        let weights = t.g.softmax(mix, 1)?;
        Ok((weights, new_means))
    }

    /// One decoder step. `slot` keys the prenet dropout masks.
    pub fn decoder_step(&self, t: &mut Tape<'_>, prev_frame: Var, memory: Var, state: &DecoderState, slot: u64) -> Result<StepOutput> {
        let n = t.g.shape(memory)[0];
        let p = self.prenet1.forward(t, prev_frame)?;
        let p = t.g.relu(p);
        let p = t.g.dropout(p, self.dropout, PRENET_LAYER_KEY, 2 * slot)?;
        let p = self.prenet2.forward(t, p)?;
        let p = t.g.relu(p);
        let p = t.g.dropout(p, self.dropout, PRENET_LAYER_KEY, 2 * slot + 1)?;
        let x1 = t.g.concat(&[p, state.context], 1)?;
        let h1 = self.gru1.step(t, x1, state.h1)?;
        let (weights, means) = self.gmm_attention_step(t, h1, state.means, n)?;
        let context = t.g.matmul(weights, memory)?;
        let x2 = t.g.concat(&[h1, context], 1)?;
        let h2 = self.gru2.step(t, x2, state.h2)?;
        let out = t.g.concat(&[h2, context], 1)?;
        let frame = self.frame.forward(t, out)?;
        let stop_logit = self.stop.forward(t, out)?;
        Ok(StepOutput {
            frame,
            stop_logit,
            weights,
            state: DecoderState { h1, h2, context, means },
        })
    }

    /// Step `t` consumes target frame `t − 1` (zeros at `t = 0`).
    pub fn decode_teacher_forced(&self, t: &mut Tape<'_>, memory: Var, targets: &Tensor) -> Result<Decoded> {
        let (frames, bands) = targets
            .dims2()
            .ok_or_else(|| Error::invalid("decode_teacher_forced", "targets must be T×B"))?;
        if frames == 0 || bands != self.bands {
            return Err(Error::shape("decode_teacher_forced", targets.shape(), &[frames, self.bands]));
        }
        let mut prev_rows = vec![0.0; frames * bands];
        prev_rows[bands..].copy_from_slice(&targets.data()[..(frames - 1) * bands]);
        let prev = t.constant(Tensor::new(vec![frames, bands], prev_rows)?);
        let mut state = self.initial_state(t);
        let mut out = Decoded {
            frames: prev,
            stop_logits: prev,
            weights: Vec::with_capacity(frames),
            means: Vec::with_capacity(frames),
        };
        let mut frame_vars = Vec::with_capacity(frames);
        let mut stop_vars = Vec::with_capacity(frames);
        for step in 0..frames {
            let pf = t.g.slice(prev, 0, step, 1)?;
            let s = self.decoder_step(t, pf, memory, &state, step as u64)?;
            frame_vars.push(s.frame);
            stop_vars.push(s.stop_logit);
            out.weights.push(s.weights);
            out.means.push(s.state.means);
            state = s.state;
        }
        out.frames = t.g.concat(&frame_vars, 0)?;
        out.stop_logits = t.g.concat(&stop_vars, 0)?;
        Ok(out)
    }

    /// Feeds back its own frames until the stop probability exceeds 0.5 or
    /// `max_frames` frames exist.
    pub fn decode_free_running(&self, t: &mut Tape<'_>, memory: Var, max_frames: usize) -> Result<Decoded> {
        if max_frames == 0 {
            return Err(Error::invalid("decode_free_running", "max_frames must be ≥ 1"));
        }
        let mut state = self.initial_state(t);
        let mut prev = t.constant(Tensor::zeros(&[1, self.bands]));
        let mut frame_vars = Vec::new();
        let mut stop_vars = Vec::new();
        let mut weights = Vec::new();
        let mut means = Vec::new();
        for step in 0..max_frames {
            let s = self.decoder_step(t, prev, memory, &state, step as u64)?;
            frame_vars.push(s.frame);
            stop_vars.push(s.stop_logit);
            weights.push(s.weights);
            means.push(s.state.means);
            state = s.state;
            prev = s.frame;
            if t.g.value(s.stop_logit).item() > 0.0 {
                break;
            }
        }
        Ok(Decoded {
            frames: t.g.concat(&frame_vars, 0)?,
            stop_logits: t.g.concat(&stop_vars, 0)?,
            weights,
            means,
        })
    }
}

/// Mean squared error over all elements.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Stop-token BCE over `T×1` logits: target 1 on the final frame only,
/// positive class weighted by `pos_weight`, averaged over frames.
pub fn stop_loss(g: &mut Graph, logits: Var, pos_weight: f64) -> Result<Var> {
    let frames = g.shape(logits)[0];
    let mut pos = vec![0.0; frames];
    let mut neg = vec![1.0; frames];
    pos[frames - 1] = pos_weight;
    neg[frames - 1] = 0.0;
    let pos = g.constant(Tensor::new(vec![frames, 1], pos)?);
    let neg = g.constant(Tensor::new(vec![frames, 1], neg)?);
    let nl = g.neg(logits);
    let sp_neg = g.softplus(nl);
    let sp_pos = g.softplus(logits);
    let a = g.mul(pos, sp_neg)?;
    let b = g.mul(neg, sp_pos)?;
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}
