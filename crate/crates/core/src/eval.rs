//! Held-out evaluation producing an `EvalReport`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Segment, Utterance};
use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{
    classification_accuracy, durations_from_attention, extract_prosody, mcd_cepstra, mel_to_cepstra, pearson,
    silhouette,
};
use crate::model::vae::{emotion_centroids, EmotionCentroids};
use crate::model::{Model, Prediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Teacher-forced with each utterance's own reference `μ`.
    Parallel,
    /// Free-running from the emotion centroid of the training set.
    Nonparallel,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Parallel => "parallel",
            EvalMode::Nonparallel => "nonparallel",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parallel" => Ok(EvalMode::Parallel),
            "nonparallel" | "non-parallel" => Ok(EvalMode::Nonparallel),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected parallel or nonparallel"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionMetrics {
    pub emotion: Emotion,
    pub mcd: f64,
    pub r_energy: f64,
    pub r_duration: f64,
    pub r_f0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub mcd: f64,
    pub r_energy: f64,
    pub r_duration: f64,
    pub r_f0: f64,
    /// Silhouette of held-out `μ` by emotion label.
    pub silhouette: f64,
    /// Classifier accuracy on held-out `μ`.
    pub accuracy: f64,
    pub mean_mu_norm: f64,
    /// Fraction of free-running outputs within ×2 of the reference length.
    pub length_within_2x: f64,
    pub gate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub mode: EvalMode,
    pub seed: u64,
    pub test_utterances: usize,
    pub per_emotion: Vec<EmotionMetrics>,
    pub overall: OverallMetrics,
}

/// Per-utterance evaluation result.
#[derive(Clone, Debug)]
pub struct UtteranceResult {
    pub emotion: Emotion,
    pub mu: Vec<f64>,
    pub logits: Vec<f64>,
    pub mcd: f64,
    pub frames: usize,
    pub ref_frames: usize,
    /// (ground truth, predicted) per phoneme.
    pub energy: Vec<(f64, f64)>,
    pub duration: Vec<(f64, f64)>,
    pub f0: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// Uses the reference mel and alignment as the prediction; every
    /// distortion is then zero and every correlation one.
    pub self_check: bool,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::Parallel,
            self_check: false,
            exec: Exec::from_env(),
        }
    }
}

/// Frame runs from attention argmax; phonemes with no frames are `None`.
fn attention_segments(attention: &[Vec<f64>], phonemes: usize) -> Vec<Option<Segment>> {
    let mut segs: Vec<Option<Segment>> = vec![None; phonemes];
    for (f, row) in attention.iter().enumerate() {
        let p = crate::metrics::argmax(row);
        match &mut segs[p] {
            Some(s) => s.end = f + 1,
            slot => *slot = Some(Segment { start: f, end: f + 1 }),
        }
    }
    segs
}

fn evaluate_one(model: &Model, utt: &Utterance, centroids: Option<&EmotionCentroids>, opts: &EvalOptions) -> Result<UtteranceResult> {
    let cfg = &model.config;
    let hop = cfg.corpus.hop_ms;
    let mu = model.embed(&utt.mel)?;
    let logits = model.classify(&mu)?;
    let n = utt.text.len();
    let truth = extract_prosody(&utt.mel, &utt.alignment, hop)?;
    let pred = if opts.self_check {
        Prediction {
            mel: utt.mel.clone(),
            stop_logits: vec![0.0; utt.frames()],
            attention: utt
                .alignment
                .iter()
                .enumerate()
                .flat_map(|(i, s)| {
                    let mut row = vec![0.0; n];
                    row[i] = 1.0;
                    std::iter::repeat_n(row, s.frames())
                })
                .collect(),
        }
    } else {
        match opts.mode {
            EvalMode::Parallel => model.predict_teacher_forced(utt, &mu)?,
            EvalMode::Nonparallel => {
                let z = centroids.expect("centroids for nonparallel mode").get(utt.emotion);
                let max = ((utt.frames() as f64 * cfg.eval.max_frames_factor).ceil() as usize).max(1);
                model.synthesize(&utt.text, z, max)?
            }
        }
    };
    let k = cfg.eval.cepstral_coeffs;
    let pc = mel_to_cepstra(&pred.mel, k)?;
    let rc = mel_to_cepstra(&utt.mel, k)?;
    let common = pc.len().min(rc.len());
    let mcd = mcd_cepstra(&pc[..common], &rc[..common])?;
    let (mut energy, mut duration, mut f0) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    if opts.mode == EvalMode::Parallel {
        // teacher forcing keeps frame parity, so the reference alignment applies
        let p = extract_prosody(&pred.mel, &utt.alignment, hop)?;
        for (t, q) in truth.iter().zip(&p) {
            energy.push((t.energy, q.energy));
            duration.push((t.duration_ms, q.duration_ms));
            f0.push((t.f0, q.f0));
        }
    } else {
        let dur_pred = durations_from_attention(&pred.attention, n, hop);
        duration.extend(truth.iter().zip(&dur_pred).map(|(t, &p)| (t.duration_ms, p)));
        let segs = attention_segments(&pred.attention, n);
        let present: Vec<(usize, Segment)> = segs.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).collect();
        let spans: Vec<Segment> = present.iter().map(|p| p.1).collect();
        if let Ok(p) = extract_prosody(&pred.mel, &spans, hop) {
            for ((i, _), q) in present.iter().zip(&p) {
                energy.push((truth[*i].energy, q.energy));
                f0.push((truth[*i].f0, q.f0));
            }
        }
    }
    Ok(UtteranceResult {
        emotion: utt.emotion,
        mu,
        logits,
        mcd,
        frames: pred.mel.shape()[0],
        ref_frames: utt.frames(),
        energy,
        duration,
        f0,
    })
}

/// Pearson r over pooled pairs; a constant side yields 0.
fn pooled_r(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.unzip();
    match pearson(&x, &y) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("correlation undefined ({e}); reporting 0");
            0.0
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates `test`; nonparallel mode needs `train` for the emotion centroids.
pub fn evaluate(model: &Model, train: &[Utterance], test: &[Utterance], opts: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate", "empty test set"));
    }
    let centroids = match opts.mode {
        EvalMode::Nonparallel if !opts.self_check => {
            let mus = opts.exec.map(train, |_, u| model.embed(&u.mel));
            let mus = mus.into_iter().collect::<Result<Vec<_>>>()?;
            let labels: Vec<Emotion> = train.iter().map(|u| u.emotion).collect();
            Some(emotion_centroids(&mus, &labels)?)
        }
        _ => None,
    };
    let results = opts.exec.map(test, |_, u| evaluate_one(model, u, centroids.as_ref(), opts));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    report_from_results(model, opts, &results)
}

pub fn report_from_results(model: &Model, opts: &EvalOptions, results: &[UtteranceResult]) -> Result<EvalReport> {
    let per_emotion = Emotion::ALL
        .iter()
        .map(|&e| {
            let rs: Vec<&UtteranceResult> = results.iter().filter(|r| r.emotion == e).collect();
            EmotionMetrics {
                emotion: e,
                mcd: mean(rs.iter().map(|r| r.mcd)),
                r_energy: pooled_r(rs.iter().flat_map(|r| r.energy.iter().copied())),
                r_duration: pooled_r(rs.iter().flat_map(|r| r.duration.iter().copied())),
                r_f0: pooled_r(rs.iter().flat_map(|r| r.f0.iter().copied())),
            }
        })
        .collect();
    let mus: Vec<Vec<f64>> = results.iter().map(|r| r.mu.clone()).collect();
    let labels: Vec<usize> = results.iter().map(|r| r.emotion.index()).collect();
    let distinct = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    let sil = if distinct >= 2 { silhouette(&mus, &labels)? } else { 0.0 };
    let logits: Vec<Vec<f64>> = results.iter().map(|r| r.logits.clone()).collect();
    let overall = OverallMetrics {
        mcd: mean(results.iter().map(|r| r.mcd)),
        r_energy: pooled_r(results.iter().flat_map(|r| r.energy.iter().copied())),
        r_duration: pooled_r(results.iter().flat_map(|r| r.duration.iter().copied())),
        r_f0: pooled_r(results.iter().flat_map(|r| r.f0.iter().copied())),
        silhouette: sil,
        accuracy: classification_accuracy(&logits, &labels)?,
        mean_mu_norm: mean(mus.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())),
        length_within_2x: mean(results.iter().map(|r| {
            let ratio = r.frames as f64 / r.ref_frames as f64;
            if (0.5..=2.0).contains(&ratio) {
                1.0
            } else {
                0.0
            }
        })),
        gate: model.gate_value(),
    };
    let report = EvalReport {
        system: model.variant().name().to_string(),
        mode: opts.mode,
        seed: model.config.seed,
        test_utterances: results.len(),
        per_emotion,
        overall,
    };
    report.check_finite()?;
    Ok(report)
}

impl EvalReport {
    fn check_finite(&self) -> Result<()> {
        let bad = self.csv_rows().into_iter().find(|r| !r.3.is_finite());
        match bad {
            Some((s, e, m, v)) => Err(Error::NonFinite(format!("report {s}/{e}/{m} = {v}"))),
            None => Ok(()),
        }
    }

    /// `(system, emotion, metric, value)` rows; the overall block uses emotion `overall`.
    pub fn csv_rows(&self) -> Vec<(String, String, &'static str, f64)> {
        let mut rows = Vec::with_capacity(NUM_EMOTIONS * 4 + 9);
        for m in &self.per_emotion {
            for (name, v) in [("mcd", m.mcd), ("r_energy", m.r_energy), ("r_duration", m.r_duration), ("r_f0", m.r_f0)] {
                rows.push((self.system.clone(), m.emotion.name().to_string(), name, v));
            }
        }
        let o = &self.overall;
        let mut overall = vec![
            ("mcd", o.mcd),
            ("r_energy", o.r_energy),
            ("r_duration", o.r_duration),
            ("r_f0", o.r_f0),
            ("silhouette", o.silhouette),
            ("accuracy", o.accuracy),
            ("mean_mu_norm", o.mean_mu_norm),
            ("length_within_2x", o.length_within_2x),
        ];
        if let Some(g) = o.gate {
            overall.push(("gate", g));
        }
        for (name, v) in overall {
            rows.push((self.system.clone(), "overall".to_string(), name, v));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("system,emotion,metric,value\n");
        for (sys, e, m, v) in self.csv_rows() {
            s.push_str(&format!("{sys},{e},{m},{v}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
