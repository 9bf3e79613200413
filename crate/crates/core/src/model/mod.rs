//! Full system: text encoder, optional layer aggregation, reference VAE,
//! emotion classifier and GMM-attention decoder.

pub mod aggregation;
pub mod decoder;
pub mod encoder;
pub mod vae;

use crate::autodiff::kernels::mix64;
use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::config::{ClassifierInput, QuerySource, Regularizer, SystemConfig, Variant};
use crate::corpus::{Text, Utterance};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamSet, Tape};

use aggregation::Aggregator;
use decoder::Decoder;
use encoder::TextEncoder;
use vae::{EmotionClassifier, ReferenceEncoder};

pub struct Model {
    pub config: SystemConfig,
    pub params: ParamSet,
    encoder: TextEncoder,
    vae: ReferenceEncoder,
    classifier: EmotionClassifier,
    aggregator: Option<Aggregator>,
    decoder: Decoder,
}

/// Loss terms of one utterance as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub stop: Var,
    pub reg: Var,
    pub cls: Var,
}

/// Scalar loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub stop: f64,
    pub reg: f64,
    pub cls: f64,
}

impl LossValues {
    pub fn read(g: &Graph, v: &LossVars) -> Self {
        LossValues {
            total: g.value(v.total).item(),
            recon: g.value(v.recon).item(),
            stop: g.value(v.stop).item(),
            reg: g.value(v.reg).item(),
            cls: g.value(v.cls).item(),
        }
    }

    pub fn add_scaled(&mut self, o: &LossValues, s: f64) {
        self.total += s * o.total;
        self.recon += s * o.recon;
        self.stop += s * o.stop;
        self.reg += s * o.reg;
        self.cls += s * o.cls;
    }
}

/// Decoder output read back from a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mel: Tensor,
    pub stop_logits: Vec<f64>,
    /// Per frame, attention weights over phoneme positions.
    pub attention: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        config.validate()?;
        let bands = config.corpus.bands;
        let m = &config.model;
        let mut b = Builder::new(mix64(config.seed ^ 0x1417));
        let encoder = TextEncoder::new(&mut b, m)?;
        let vae = ReferenceEncoder::new(&mut b, m, bands, config.variant.regularizer())?;
        let classifier = EmotionClassifier::new(&mut b, m)?;
        let aggregator = match config.variant.query() {
            QuerySource::None => None,
            q => Some(Aggregator::new(&mut b, m, q, encoder.num_blocks() + 1)?),
        };
        let decoder = Decoder::new(&mut b, m, bands)?;
        Ok(Model {
            config: config.clone(),
            params: b.params,
            encoder,
            vae,
            classifier,
            aggregator,
            decoder,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn bands(&self) -> usize {
        self.config.corpus.bands
    }

    pub fn latent_dim(&self) -> usize {
        self.config.model.latent_dim
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn aggregator(&self) -> Option<&Aggregator> {
        self.aggregator.as_ref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn reference_encoder(&self) -> &ReferenceEncoder {
        &self.vae
    }

    pub fn classifier(&self) -> &EmotionClassifier {
        &self.classifier
    }

    /// `sigmoid(w)` of the combination gate, if the variant has one.
    pub fn gate_value(&self) -> Option<f64> {
        let id = self.aggregator.as_ref()?.gate_param()?;
        let w = self.params.get(id).data()[0];
        Some(1.0 / (1.0 + (-w).exp()))
    }

    /// Sets the raw gate parameter `w`; errors when the variant has no gate.
    pub fn set_gate_logit(&mut self, w: f64) -> Result<()> {
        let id = self
            .aggregator
            .as_ref()
            .and_then(|a| a.gate_param())
            .ok_or_else(|| Error::invalid("set_gate_logit", format!("{} has no gate", self.variant())))?;
        self.params.get_mut(id).data_mut()[0] = w;
        Ok(())
    }

    pub fn tape(&self, mode: Mode) -> Tape<'_> {
        Tape::new(Graph::new(mode), &self.params)
    }

    /// Decoder memory for `text` conditioned on `z` (`1×latent`).
    pub fn memory(&self, t: &mut Tape<'_>, text: &Text, z: Var) -> Result<Var> {
        let stack = self.encoder.encode(t, text)?;
        let enc = match &self.aggregator {
            Some(a) => a.forward(t, &stack.layers, Some(z))?.output,
            None => *stack.layers.last().unwrap(),
        };
        self.decoder.memory(t, enc, z)
    }

    /// Teacher-forced training loss. `eps` selects the sampled latent;
    /// `None` uses `z = μ`.
    pub fn loss(&self, t: &mut Tape<'_>, utt: &Utterance, eps: Option<&Tensor>) -> Result<LossVars> {
        let lc = &self.config.loss;
        let mel = t.constant(utt.mel.clone());
        let latent = self.vae.encode(t, mel)?;
        let z = match eps {
            Some(e) => vae::reparameterize(&mut t.g, &latent, e)?,
            None => latent.mu,
        };
        let memory = self.memory(t, &utt.text, z)?;
        let dec = self.decoder.decode_teacher_forced(t, memory, &utt.mel)?;
        let recon = decoder::mse(&mut t.g, dec.frames, mel)?;
        let stop = decoder::stop_loss(&mut t.g, dec.stop_logits, lc.stop_pos_weight)?;
        let (reg, weight) = match self.variant().regularizer() {
            Regularizer::Sus => (vae::sus_loss(&mut t.g, latent.mu), lc.lambda_sus),
            Regularizer::Kl => {
                let lv = latent.log_var.expect("KL variant has a log-variance head");
                (vae::kl_loss(&mut t.g, latent.mu, lv)?, lc.lambda_kl)
            }
        };
        let cls_in = match self.config.model.classifier_input {
            ClassifierInput::Sampled => z,
            ClassifierInput::Mean => latent.mu,
        };
        let logits = self.classifier.logits(t, cls_in)?;
        let cls = vae::cross_entropy(&mut t.g, logits, utt.emotion.index())?;
        let total = t.g.add(recon, stop)?;
        let r = t.g.scale(reg, weight);
        let total = t.g.add(total, r)?;
        let c = t.g.scale(cls, lc.lambda_cls);
        let total = t.g.add(total, c)?;
        Ok(LossVars {
            total,
            recon,
            stop,
            reg,
            cls,
        })
    }

    /// `μ` of a reference mel.
    pub fn embed(&self, mel: &Tensor) -> Result<Vec<f64>> {
        let mut t = self.tape(Mode::Eval);
        let m = t.constant(mel.clone());
        let lat = self.vae.encode(&mut t, m)?;
        Ok(t.g.value(lat.mu).data().to_vec())
    }

    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut t = self.tape(Mode::Eval);
        let zv = self.latent_var(&mut t, z)?;
        let l = self.classifier.logits(&mut t, zv)?;
        Ok(t.g.value(l).data().to_vec())
    }

    fn latent_var(&self, t: &mut Tape<'_>, z: &[f64]) -> Result<Var> {
        if z.len() != self.latent_dim() {
            return Err(Error::shape("latent", &[z.len()], &[self.latent_dim()]));
        }
        Ok(t.constant(Tensor::row(z.to_vec())))
    }

    fn read_prediction(t: &Tape<'_>, dec: &decoder::Decoded) -> Prediction {
        Prediction {
            mel: t.g.value(dec.frames).clone(),
            stop_logits: t.g.value(dec.stop_logits).data().to_vec(),
            attention: dec.weights.iter().map(|w| t.g.value(*w).data().to_vec()).collect(),
        }
    }

    /// Teacher-forced prediction of `utt` conditioned on latent `z`.
    pub fn predict_teacher_forced(&self, utt: &Utterance, z: &[f64]) -> Result<Prediction> {
        let mut t = self.tape(Mode::Eval);
        let zv = self.latent_var(&mut t, z)?;
        let memory = self.memory(&mut t, &utt.text, zv)?;
        let dec = self.decoder.decode_teacher_forced(&mut t, memory, &utt.mel)?;
        Ok(Self::read_prediction(&t, &dec))
    }

    pub fn synthesize(&self, text: &Text, z: &[f64], max_frames: usize) -> Result<Prediction> {
        let mut t = self.tape(Mode::Eval);
        let zv = self.latent_var(&mut t, z)?;
        let memory = self.memory(&mut t, text, zv)?;
        let dec = self.decoder.decode_free_running(&mut t, memory, max_frames)?;
        Ok(Self::read_prediction(&t, &dec))
    }
}
