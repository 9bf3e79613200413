//! Minibatch training with Adam.
//!
//! A step draws a batch from (seed, step) alone, so resuming from a
//! checkpoint replays the uninterrupted trajectory exactly. Each utterance
//! gets its own tape; gradients are summed in batch-slot order.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::mix64;
use crate::autodiff::{AdamState, Mode, Tensor};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{vae, LossValues, Model};

/// Training batch indices for `step`.
pub fn batch_indices(seed: u64, step: u64, corpus_len: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xBA7C) ^ mix64(step));
    sample(&mut rng, corpus_len, batch.min(corpus_len)).into_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: LossValues,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<f64>,
}

impl StepStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// Batch-mean loss and gradients (in parameter order) at `step`.
pub fn batch_gradients(
    model: &Model,
    utts: &[&Utterance],
    seed: u64,
    step: u64,
    exec: Exec,
) -> Result<(LossValues, Vec<Vec<f64>>)> {
    let latent = model.latent_dim();
    let per_utt = exec.map(utts, |slot, utt| -> Result<(LossValues, Vec<Vec<f64>>)> {
        let mode = Mode::Train {
            seed: mix64(seed) ^ slot as u64,
            step,
        };
        let mut t = model.tape(mode);
        let eps = vae::epsilon(seed, step, slot as u64, latent);
        let l = model.loss(&mut t, utt, Some(&eps))?;
        let vals = LossValues::read(&t.g, &l);
        if !vals.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: loss {:?} on utterance {}",
                vals, utt.id
            )));
        }
        let mut grads = t.g.backward(l.total)?;
        Ok((vals, t.param_grads(&mut grads)))
    });
    let scale = 1.0 / utts.len() as f64;
    let mut loss = LossValues::default();
    let mut sum: Option<Vec<Vec<f64>>> = None;
    for r in per_utt {
        let (vals, grads) = r?;
        loss.add_scaled(&vals, scale);
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = sum.ok_or_else(|| Error::invalid("batch_gradients", "empty batch"))?;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((loss, grads))
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: u64,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(model: Model, exec: Exec) -> Self {
        let adam = AdamState::new(model.config.train.adam, model.params.tensors());
        Trainer {
            model,
            adam,
            step: 0,
            exec,
        }
    }

    pub fn train_step(&mut self, corpus: &[Utterance]) -> Result<StepStats> {
        if corpus.is_empty() {
            return Err(Error::invalid("train_step", "empty training set"));
        }
        let cfg = &self.model.config;
        let seed = cfg.seed;
        let idx = batch_indices(seed, self.step, corpus.len(), cfg.train.batch_size);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus[i]).collect();
        let (loss, mut grads) = batch_gradients(&self.model, &batch, seed, self.step, self.exec)?;
        let grad_norm = global_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("step {}: gradient norm {grad_norm}", self.step)));
        }
        let clip = cfg.train.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            let s = clip / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        self.adam.step(self.model.params.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm,
            gate: self.model.gate_value(),
        })
    }

    /// Runs until `total_steps` steps are complete, calling `on_step` after each.
    pub fn run<F>(&mut self, corpus: &[Utterance], total_steps: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepStats) -> Result<()>,
    {
        while self.step < total_steps {
            let stats = self.train_step(corpus)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    pub fn parameters(&self) -> &[Tensor] {
        self.model.params.tensors()
    }
}
