//! Synthetic multi-emotion corpus.
//!
//! Mels are built band by band: band 0 carries an F0 proxy, band 1 carries
//! per-phoneme energy, and the remaining bands carry a smoothed per-phone
//! spectral texture. Every utterance is a pure function of
//! (profiles, config, seed, utterance index).

mod io;

pub use io::{read_corpus, write_corpus, CorpusFile, CorpusHeader, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::mix64;
use crate::autodiff::Tensor;
use crate::config::CorpusConfig;
use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const PHONE_VOCAB: usize = 32;
pub const TONE_VOCAB: usize = 5;
/// none, prosodic word, phonological phrase, intonation phrase
pub const BOUNDARY_LEVELS: usize = 4;

pub const F0_BAND: usize = 0;
pub const ENERGY_BAND: usize = 1;

/// Phoneme-level text input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Text {
    pub phones: Vec<usize>,
    pub tones: Vec<usize>,
    /// Prosodic boundary level following each phoneme.
    pub boundaries: Vec<usize>,
}

impl Text {
    pub fn new(phones: Vec<usize>, tones: Vec<usize>, boundaries: Vec<usize>) -> Result<Self> {
        let t = Text {
            phones,
            tones,
            boundaries,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phones.len();
        if n == 0 {
            return Err(Error::invalid("text", "empty phoneme sequence"));
        }
        if self.tones.len() != n || self.boundaries.len() != n {
            return Err(Error::shape("text", &[n], &[self.tones.len(), self.boundaries.len()]));
        }
        let check = |ids: &[usize], vocab: usize, what: &str| -> Result<()> {
            match ids.iter().find(|&&i| i >= vocab) {
                Some(bad) => Err(Error::invalid("text", format!("unknown {what} id {bad} (vocabulary {vocab})"))),
                None => Ok(()),
            }
        };
        check(&self.phones, PHONE_VOCAB, "phone")?;
        check(&self.tones, TONE_VOCAB, "tone")?;
        check(&self.boundaries, BOUNDARY_LEVELS, "boundary")
    }

    /// Parses whitespace-separated `phone/tone/boundary` triples, e.g. `12/3/0 5/1/3`.
    pub fn parse(s: &str) -> Result<Self> {
        let (mut p, mut t, mut b) = (vec![], vec![], vec![]);
        for tok in s.split_whitespace() {
            let parts: Vec<&str> = tok.split('/').collect();
            let num = |x: &str| {
                x.parse::<usize>()
                    .map_err(|_| Error::invalid("text", format!("bad token {tok:?}")))
            };
            match parts[..] {
                [a, c, d] => {
                    p.push(num(a)?);
                    t.push(num(c)?);
                    b.push(num(d)?);
                }
                _ => return Err(Error::invalid("text", format!("expected phone/tone/boundary, got {tok:?}"))),
            }
        }
        Text::new(p, t, b)
    }
}

/// Frame span `[start, end)` of one phoneme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn frames(&self) -> usize {
        self.end - self.start
    }
}

/// Checks that segments tile `[0, total)` with at least one frame each.
pub fn validate_alignment(alignment: &[Segment], total: usize) -> Result<()> {
    let mut cursor = 0;
    for (i, s) in alignment.iter().enumerate() {
        if s.start != cursor || s.end <= s.start {
            return Err(Error::invalid("alignment", format!("segment {i} = {s:?} does not continue at frame {cursor}")));
        }
        cursor = s.end;
    }
    if cursor != total {
        return Err(Error::invalid("alignment", format!("covers {cursor} frames, mel has {total}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: Text,
    pub emotion: Emotion,
    /// `T×B` frames.
    pub mel: Tensor,
    pub alignment: Vec<Segment>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.mel.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        if self.alignment.len() != self.text.len() {
            return Err(Error::shape("utterance", &[self.alignment.len()], &[self.text.len()]));
        }
        validate_alignment(&self.alignment, self.frames())?;
        if !self.mel.is_finite() {
            return Err(Error::NonFinite(format!("mel of {}", self.id)));
        }
        Ok(())
    }
}

/// Per-emotion prosody multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionProfile {
    pub f0_scale: f64,
    pub f0_contour_slope: f64,
    pub energy_scale: f64,
    pub duration_scale: f64,
    pub noise_std: f64,
}

impl EmotionProfile {
    fn as_array(&self) -> [f64; 5] {
        [
            self.f0_scale,
            self.f0_contour_slope,
            self.energy_scale,
            self.duration_scale,
            self.noise_std,
        ]
    }

    pub fn distance(&self, other: &EmotionProfile) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn default_profiles() -> Vec<EmotionProfile> {
    let p = |f0_scale, f0_contour_slope, energy_scale, duration_scale, noise_std| EmotionProfile {
        f0_scale,
        f0_contour_slope,
        energy_scale,
        duration_scale,
        noise_std,
    };
    vec![
        p(1.00, 0.00, 1.00, 1.00, 0.02), // neutral
        p(1.25, 0.15, 1.20, 0.85, 0.03), // happy
        p(0.80, -0.20, 0.70, 1.35, 0.02), // sad
        p(1.15, -0.10, 1.50, 0.80, 0.04), // angry
        p(0.95, -0.05, 0.60, 1.15, 0.02), // shy
        p(0.88, 0.10, 0.90, 1.20, 0.03), // concerned
        p(1.45, 0.30, 1.10, 0.95, 0.03), // surprised
    ]
}

/// Seven positive profiles, pairwise distance above 0.1.
pub fn validate_profiles(profiles: &[EmotionProfile]) -> Result<()> {
    if profiles.len() != NUM_EMOTIONS {
        return Err(Error::Config(format!("expected {NUM_EMOTIONS} profiles, got {}", profiles.len())));
    }
    for (i, p) in profiles.iter().enumerate() {
        if p.f0_scale <= 0.0 || p.energy_scale <= 0.0 || p.duration_scale <= 0.0 || p.noise_std < 0.0 {
            return Err(Error::Config(format!("profile {i} has a non-positive scale: {p:?}")));
        }
    }
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let d = profiles[i].distance(&profiles[j]);
            if d <= 0.1 {
                return Err(Error::Config(format!("profiles {i} and {j} are too close ({d:.3})")));
            }
        }
    }
    Ok(())
}

/// Generator-side per-phoneme prosody before noise.
#[derive(Clone, Debug, PartialEq)]
pub struct IntendedProsody {
    pub energy: Vec<f64>,
    pub duration_ms: Vec<f64>,
    pub f0: Vec<f64>,
}

// Per-phone templates are fixed functions of the phone id.

fn phone_unit(phone: usize, salt: u64) -> f64 {
    crate::autodiff::kernels::unit_uniform(mix64(phone as u64 * 7919 + salt))
}

fn base_duration(phone: usize, boundary: usize) -> f64 {
    let base = 2.0 + (phone_unit(phone, 1) * 3.0).floor();
    base + match boundary {
        2 => 1.0,
        3 => 2.0,
        _ => 0.0,
    }
}

fn phone_energy(phone: usize) -> f64 {
    0.7 + 0.5 * phone_unit(phone, 2)
}

fn texture(phone: usize, band: usize) -> f64 {
    let phase = std::f64::consts::TAU * phone_unit(phone, 3);
    let freq = 0.3 + 0.5 * phone_unit(phone, 4);
    0.3 + 0.25 * (1.0 + (phase + freq * band as f64).sin())
}

fn tone_shape(tone: usize, u: f64) -> f64 {
    match tone {
        1 => 0.12,
        2 => -0.08 + 0.2 * u,
        3 => -0.05 - 0.15 * (std::f64::consts::PI * u).sin(),
        4 => 0.12 - 0.25 * u,
        _ => 0.0,
    }
}

/// Per-utterance draw of the prosody scales used for synthesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProsodyScales {
    pub f0_scale: f64,
    pub f0_slope: f64,
    pub energy_scale: f64,
    pub duration_scale: f64,
    pub noise_std: f64,
}

impl From<&EmotionProfile> for ProsodyScales {
    fn from(p: &EmotionProfile) -> Self {
        ProsodyScales {
            f0_scale: p.f0_scale,
            f0_slope: p.f0_contour_slope,
            energy_scale: p.energy_scale,
            duration_scale: p.duration_scale,
            noise_std: p.noise_std,
        }
    }
}

/// Renders a mel, alignment and intended prosody for `text`.
pub fn synthesize(
    text: &Text,
    scales: &ProsodyScales,
    bands: usize,
    hop_ms: f64,
    rng: &mut impl Rng,
) -> (Tensor, Vec<Segment>, IntendedProsody) {
    let n = text.len();
    let mut alignment = Vec::with_capacity(n);
    let mut cursor = 0;
    for i in 0..n {
        let d = (base_duration(text.phones[i], text.boundaries[i]) * scales.duration_scale)
            .round()
            .max(1.0) as usize;
        alignment.push(Segment {
            start: cursor,
            end: cursor + d,
        });
        cursor += d;
    }
    let total = cursor;
    let mut clean = vec![0.0; total * bands];
    for (i, seg) in alignment.iter().enumerate() {
        let (phone, tone, boundary) = (text.phones[i], text.tones[i], text.boundaries[i]);
        let final_drop = match boundary {
            3 => 0.08,
            2 => 0.04,
            _ => 0.0,
        };
        let energy = phone_energy(phone)
            * scales.energy_scale
            * if boundary == 3 { 0.85 } else { 1.0 };
        for f in seg.start..seg.end {
            let u = (f - seg.start) as f64 / seg.frames().max(2).saturating_sub(1) as f64;
            let pos = (f as f64 + 0.5) / total as f64;
            let f0 = scales.f0_scale * (1.0 + tone_shape(tone, u) - final_drop)
                + scales.f0_slope * (pos - 0.5);
            let row = &mut clean[f * bands..(f + 1) * bands];
            row[F0_BAND] = f0;
            row[ENERGY_BAND] = energy * (0.92 + 0.08 * (std::f64::consts::PI * u).sin());
            for (b, v) in row.iter_mut().enumerate().skip(2) {
                *v = texture(phone, b) * (0.5 + 0.5 * scales.energy_scale);
            }
        }
    }
    // 3-tap temporal smoothing of texture bands
    let src = clean.clone();
    for f in 0..total {
        let prev = f.saturating_sub(1);
        let next = (f + 1).min(total - 1);
        for b in 2..bands {
            clean[f * bands + b] = 0.25 * src[prev * bands + b] + 0.5 * src[f * bands + b] + 0.25 * src[next * bands + b];
        }
    }
    let mean_energy = (0..total).map(|f| clean[f * bands + ENERGY_BAND]).sum::<f64>() / total as f64;
    let mut intended = IntendedProsody {
        energy: Vec::with_capacity(n),
        duration_ms: Vec::with_capacity(n),
        f0: Vec::with_capacity(n),
    };
    for seg in &alignment {
        let frames = seg.frames() as f64;
        let band_mean = |b: usize| (seg.start..seg.end).map(|f| clean[f * bands + b]).sum::<f64>() / frames;
        intended.energy.push(band_mean(ENERGY_BAND) / mean_energy);
        intended.duration_ms.push(frames * hop_ms);
        intended.f0.push(band_mean(F0_BAND));
    }
    let mel: Vec<f64> = if scales.noise_std > 0.0 {
        clean
            .iter()
            .map(|&v| v + scales.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        clean
    };
    (Tensor::from_parts(vec![total, bands], mel), alignment, intended)
}

fn random_text(rng: &mut impl Rng, min_len: usize, max_len: usize) -> Text {
    let n = rng.random_range(min_len..=max_len);
    let phones = (0..n).map(|_| rng.random_range(0..PHONE_VOCAB)).collect();
    let tones = (0..n).map(|_| rng.random_range(0..TONE_VOCAB)).collect();
    // words of 1-3 phonemes, phrases of 1-2 words, utterance-final IPH
    let mut boundaries = vec![0; n];
    let mut i = 0;
    let mut words_in_phrase = 0;
    while i < n {
        let w = rng.random_range(1..=3usize).min(n - i);
        i += w;
        words_in_phrase += 1;
        let end_phrase = words_in_phrase >= 2 || rng.random_bool(0.3);
        boundaries[i - 1] = if end_phrase { 2 } else { 1 };
        if end_phrase {
            words_in_phrase = 0;
        }
    }
    boundaries[n - 1] = 3;
    Text {
        phones,
        tones,
        boundaries,
    }
}

fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xC0_2B05) ^ mix64(index as u64))
}

/// Generates one utterance; `index` selects emotion and randomness.
pub fn generate_utterance(
    profiles: &[EmotionProfile],
    cfg: &CorpusConfig,
    seed: u64,
    index: usize,
) -> (Utterance, IntendedProsody) {
    let emotion = Emotion::from_index(index / cfg.n_per_emotion).expect("index within corpus");
    let mut rng = utterance_rng(seed, index);
    let text = random_text(&mut rng, cfg.min_phonemes, cfg.max_phonemes);
    let mut scales = ProsodyScales::from(&profiles[emotion.index()]);
    if cfg.utterance_jitter > 0.0 {
        let mut jitter = || (cfg.utterance_jitter * rng.sample::<f64, _>(StandardNormal)).exp();
        scales.f0_scale *= jitter();
        scales.energy_scale *= jitter();
        scales.duration_scale *= jitter();
    }
    let (mel, alignment, intended) = synthesize(&text, &scales, cfg.bands, cfg.hop_ms, &mut rng);
    let utt = Utterance {
        id: format!("{}_{:04}", emotion.name(), index % cfg.n_per_emotion),
        text,
        emotion,
        mel,
        alignment,
    };
    (utt, intended)
}

/// `n_per_emotion × 7` utterances ordered by emotion.
pub fn generate_corpus(
    profiles: &[EmotionProfile],
    cfg: &CorpusConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Utterance>> {
    Ok(generate_corpus_with_truth(profiles, cfg, seed, exec)?
        .into_iter()
        .map(|(u, _)| u)
        .collect())
}

pub fn generate_corpus_with_truth(
    profiles: &[EmotionProfile],
    cfg: &CorpusConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<(Utterance, IntendedProsody)>> {
    if cfg.n_per_emotion < 10 {
        return Err(Error::Config(format!("n_per_emotion {} < 10", cfg.n_per_emotion)));
    }
    if profiles.len() != NUM_EMOTIONS {
        return Err(Error::Config(format!("expected {NUM_EMOTIONS} profiles, got {}", profiles.len())));
    }
    if profiles.iter().any(|p| p.f0_scale <= 0.0 || p.energy_scale <= 0.0 || p.duration_scale <= 0.0) {
        return Err(Error::Config("profile scales must be positive".into()));
    }
    let total = cfg.n_per_emotion * NUM_EMOTIONS;
    Ok(exec.map_range(total, |i| generate_utterance(profiles, cfg, seed, i)))
}

/// Stratified per-emotion split; each emotion gets `round(count × ratio)`
/// training utterances chosen by a seeded shuffle.
pub fn split_corpus(corpus: &[Utterance], ratio: f64, seed: u64) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split_corpus", format!("ratio {ratio} outside (0, 1)")));
    }
    let mut by_emotion: Vec<Vec<usize>> = vec![Vec::new(); NUM_EMOTIONS];
    for (i, u) in corpus.iter().enumerate() {
        by_emotion[u.emotion.index()].push(i);
    }
    let empty: Vec<String> = Emotion::ALL
        .iter()
        .filter(|e| by_emotion[e.index()].is_empty())
        .map(|e| e.name().to_string())
        .collect();
    if !empty.is_empty() {
        return Err(Error::MissingEmotion(empty));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (e, idx) in by_emotion.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5B117) ^ e as u64);
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_train = ((idx.len() as f64 * ratio).round() as usize).min(idx.len());
        let (a, b) = idx.split_at(n_train);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        train.extend(a.into_iter().map(|i| corpus[i].clone()));
        test.extend(b.into_iter().map(|i| corpus[i].clone()));
    }
    Ok((train, test))
}
