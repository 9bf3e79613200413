//! Run configuration. Loaded from TOML; every field has a default so a config
//! file only needs to list what it changes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::corpus::EmotionProfile;
use crate::error::{Error, Result};

/// The four ablation systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "BASE-SUS")]
    BaseSus,
    #[serde(rename = "SA-WA")]
    SaWa,
    #[serde(rename = "SA-WAC")]
    SaWac,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::BaseSus, Variant::SaWa, Variant::SaWac];

    pub fn regularizer(self) -> Regularizer {
        match self {
            Variant::Base => Regularizer::Kl,
            _ => Regularizer::Sus,
        }
    }

    pub fn query(self) -> QuerySource {
        match self {
            Variant::Base | Variant::BaseSus => QuerySource::None,
            Variant::SaWa => QuerySource::Textual,
            Variant::SaWac => QuerySource::Combined,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "BASE",
            Variant::BaseSus => "BASE-SUS",
            Variant::SaWa => "SA-WA",
            Variant::SaWac => "SA-WAC",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected BASE, BASE-SUS, SA-WA or SA-WAC")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    Kl,
    Sus,
}

/// Where the layer-aggregation queries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    /// No aggregation; the decoder reads the top encoder layer.
    None,
    Textual,
    Acoustic,
    Combined,
}

/// How phone, tone and boundary embeddings are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedCombine {
    Sum,
    Concat,
}

/// What the emotion classifier sees during training. Evaluation always
/// classifies the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInput {
    /// The reparameterized sample `z`.
    Sampled,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_per_emotion: usize,
    pub bands: usize,
    pub hop_ms: f64,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Log-normal spread of per-utterance prosody scales around the emotion profile.
    pub utterance_jitter: f64,
    pub split_ratio: f64,
    /// Overrides the built-in seven profiles when present.
    pub profiles: Option<Vec<EmotionProfile>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_per_emotion: 70,
            bands: 16,
            hop_ms: 12.5,
            min_phonemes: 5,
            max_phonemes: 9,
            utterance_jitter: 0.05,
            split_ratio: 0.9,
            profiles: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_heads: usize,
    pub enc_blocks: usize,
    pub prenet_layers: usize,
    pub prenet_kernel: usize,
    pub ffn_mult: usize,
    pub embed_combine: EmbedCombine,
    pub agg_heads: usize,
    pub latent_dim: usize,
    pub sigma_const: f64,
    pub ref_channels: Vec<usize>,
    pub ref_gru: usize,
    pub cls_hidden: usize,
    pub classifier_input: ClassifierInput,
    pub query_hidden: usize,
    pub dec_prenet: usize,
    pub dec_gru: usize,
    pub gmm_mixtures: usize,
    pub gmm_hidden: usize,
    pub dec_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            enc_heads: 4,
            enc_blocks: 3,
            prenet_layers: 3,
            prenet_kernel: 5,
            ffn_mult: 4,
            embed_combine: EmbedCombine::Sum,
            agg_heads: 2,
            latent_dim: 8,
            sigma_const: 1.0,
            ref_channels: vec![8, 8, 16],
            ref_gru: 32,
            cls_hidden: 16,
            classifier_input: ClassifierInput::Sampled,
            query_hidden: 32,
            dec_prenet: 32,
            dec_gru: 64,
            gmm_mixtures: 2,
            gmm_hidden: 32,
            dec_dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_sus: f64,
    pub lambda_kl: f64,
    pub lambda_cls: f64,
    pub stop_pos_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sus: 0.02,
            lambda_kl: 0.02,
            lambda_cls: 0.1,
            stop_pos_weight: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 6000,
            batch_size: 8,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            log_every: 100,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cepstral_coeffs: usize,
    /// Free-running decode budget as a multiple of the reference length.
    pub max_frames_factor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cepstral_coeffs: 13,
            max_frames_factor: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub variant: Variant,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            variant: Variant::SaWac,
            seed: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl SystemConfig {
    pub fn for_variant(variant: Variant) -> Self {
        SystemConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let c = &self.corpus;
        let fail = |msg: String| Err(Error::Config(msg));
        if m.d_model == 0 || m.enc_heads == 0 || !m.d_model.is_multiple_of(m.enc_heads) {
            return fail(format!("enc_heads {} must divide d_model {}", m.enc_heads, m.d_model));
        }
        if m.agg_heads == 0 || !m.d_model.is_multiple_of(m.agg_heads) {
            return fail(format!("agg_heads {} must divide d_model {}", m.agg_heads, m.d_model));
        }
        if m.prenet_kernel.is_multiple_of(2) {
            return fail(format!("prenet_kernel {} must be odd", m.prenet_kernel));
        }
        if m.latent_dim == 0 || m.sigma_const <= 0.0 {
            return fail("latent_dim must be positive and sigma_const > 0".into());
        }
        if m.ref_channels.is_empty() {
            return fail("ref_channels must list at least one conv layer".into());
        }
        if m.gmm_mixtures == 0 {
            return fail("gmm_mixtures must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dec_dropout) {
            return fail(format!("dec_dropout {} outside [0, 1)", m.dec_dropout));
        }
        if c.bands < 3 {
            return fail(format!("bands {} < 3", c.bands));
        }
        if c.n_per_emotion < 10 {
            return fail(format!("n_per_emotion {} < 10", c.n_per_emotion));
        }
        if c.min_phonemes == 0 || c.min_phonemes > c.max_phonemes {
            return fail("phoneme count range is empty".into());
        }
        if !(c.split_ratio > 0.0 && c.split_ratio < 1.0) {
            return fail(format!("split_ratio {} outside (0, 1)", c.split_ratio));
        }
        if self.eval.cepstral_coeffs == 0 || self.eval.cepstral_coeffs >= c.bands {
            return fail(format!(
                "cepstral_coeffs {} must be in 1..{}",
                self.eval.cepstral_coeffs, c.bands
            ));
        }
        if self.train.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if let Some(p) = &c.profiles {
            crate::corpus::validate_profiles(p)?;
        }
        Ok(())
    }

    pub fn profiles(&self) -> Vec<EmotionProfile> {
        self.corpus
            .profiles
            .clone()
            .unwrap_or_else(crate::corpus::default_profiles)
    }
}
