//! Objective metrics: mel cepstral distortion, silhouette, Pearson
//! correlation, phoneme-level prosody, classification accuracy and a 2-D PCA
//! projection for plotting.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{Segment, ENERGY_BAND, F0_BAND};
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-5;

/// Orthonormal DCT-II basis rows `1..=n_coeffs` for `bands` inputs.
fn dct_basis(bands: usize, n_coeffs: usize) -> Vec<f64> {
    let scale = (2.0 / bands as f64).sqrt();
    let mut basis = Vec::with_capacity(n_coeffs * bands);
    for k in 1..=n_coeffs {
        for b in 0..bands {
            basis.push(scale * (std::f64::consts::PI * k as f64 * (b as f64 + 0.5) / bands as f64).cos());
        }
    }
    basis
}

/// Cepstra `c_1..c_n` of `log(max(mel, 0) + 1e-5)` per frame; `c_0` is dropped.
pub fn mel_to_cepstra(mel: &Tensor, n_coeffs: usize) -> Result<Vec<Vec<f64>>> {
    let (frames, bands) = mel
        .dims2()
        .ok_or_else(|| Error::invalid("mel_to_cepstra", format!("mel must be T×B, got {:?}", mel.shape())))?;
    if n_coeffs >= bands {
        return Err(Error::invalid("mel_to_cepstra", format!("{n_coeffs} coefficients need more than {bands} bands")));
    }
    let basis = dct_basis(bands, n_coeffs);
    let mut logs = vec![0.0; bands];
    Ok((0..frames)
        .map(|t| {
            for (l, &v) in logs.iter_mut().zip(mel.row_slice(t)) {
                *l = (v.max(0.0) + LOG_FLOOR).ln();
            }
            basis.chunks_exact(bands).map(|row| crate::autodiff::kernels::dot(row, &logs)).collect()
        })
        .collect())
}

/// Frame-averaged `(10 / ln 10) · sqrt(2 · Σ_d (c_d − ĉ_d)²)` in dB.
pub fn mcd_cepstra(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mcd", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mcd", "no frames"));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            k * (2.0 * d2).sqrt()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn mcd(pred: &Tensor, target: &Tensor, n_coeffs: usize) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mcd", pred.shape(), target.shape()));
    }
    mcd_cepstra(&mel_to_cepstra(pred, n_coeffs)?, &mel_to_cepstra(target, n_coeffs)?)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distance. Points alone in their cluster
/// score 0, as do points whose intra and nearest-cluster distances are both 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::invalid("silhouette", "need at least two labels"));
    }
    let n = points.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclid(&points[i], &points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let slot = |l: usize| clusters.binary_search(&l).unwrap();
    let sizes = {
        let mut s = vec![0usize; clusters.len()];
        for &l in labels {
            s[slot(l)] += 1;
        }
        s
    };
    let mut total = 0.0;
    let mut sums = vec![0.0; clusters.len()];
    for i in 0..n {
        let own = slot(labels[i]);
        if sizes[own] < 2 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[slot(labels[j])] += dist[i * n + j];
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson", "need at least two samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::invalid("pearson", "zero variance"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Phoneme-level prosody attributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyRecord {
    /// Phoneme mean of the energy band over the utterance mean.
    pub energy: f64,
    pub duration_ms: f64,
    /// Phoneme mean of the F0 band.
    pub f0: f64,
}

pub fn extract_prosody(mel: &Tensor, alignment: &[Segment], hop_ms: f64) -> Result<Vec<ProsodyRecord>> {
    let (frames, bands) = mel
        .dims2()
        .ok_or_else(|| Error::invalid("extract_prosody", "mel must be T×B"))?;
    if bands <= ENERGY_BAND {
        return Err(Error::invalid("extract_prosody", format!("{bands} bands is too few")));
    }
    if let Some(bad) = alignment.iter().find(|s| s.end > frames || s.end <= s.start) {
        return Err(Error::invalid("extract_prosody", format!("segment {bad:?} outside {frames} frames")));
    }
    let band = |f: usize, b: usize| mel.data()[f * bands + b];
    let utt_energy = (0..frames).map(|f| band(f, ENERGY_BAND)).sum::<f64>() / frames as f64;
    let recs: Vec<ProsodyRecord> = alignment
        .iter()
        .map(|s| {
            let n = s.frames() as f64;
            let mean = |b: usize| (s.start..s.end).map(|f| band(f, b)).sum::<f64>() / n;
            ProsodyRecord {
                energy: mean(ENERGY_BAND) / utt_energy,
                duration_ms: n * hop_ms,
                f0: mean(F0_BAND),
            }
        })
        .collect();
    if recs.iter().any(|r| !r.energy.is_finite()) {
        return Err(Error::NonFinite("relative energy (utterance energy is zero)".into()));
    }
    Ok(recs)
}

/// Monotone segmentation of `T` frames into `phonemes` non-empty runs that
/// follows the attention argmax as closely as the constraints allow.
pub fn monotone_alignment(weights: &[Vec<f64>], phonemes: usize) -> Result<Vec<Segment>> {
    let frames = weights.len();
    if phonemes == 0 || frames < phonemes {
        return Err(Error::invalid(
            "monotone_alignment",
            format!("{frames} frames cannot cover {phonemes} phonemes"),
        ));
    }
    let mut reached = 0;
    let mut starts = vec![frames; phonemes];
    for (f, row) in weights.iter().enumerate() {
        reached = reached.max(argmax(row));
        for s in starts.iter_mut().take(reached + 1) {
            *s = (*s).min(f);
        }
    }
    starts[0] = 0;
    for i in 1..phonemes {
        starts[i] = starts[i].max(starts[i - 1] + 1);
    }
    for i in (0..phonemes).rev() {
        starts[i] = starts[i].min(frames - (phonemes - i));
    }
    Ok((0..phonemes)
        .map(|i| Segment {
            start: starts[i],
            end: starts.get(i + 1).copied().unwrap_or(frames),
        })
        .collect())
}

/// Per-phoneme durations implied by attention: each frame is credited to the
/// phoneme with the largest weight (lowest index on ties).
pub fn durations_from_attention(weights: &[Vec<f64>], phonemes: usize, hop_ms: f64) -> Vec<f64> {
    let mut counts = vec![0usize; phonemes];
    for row in weights {
        counts[argmax(row)] += 1;
    }
    counts.into_iter().map(|c| c as f64 * hop_ms).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn classification_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::shape("classification_accuracy", &[logits.len()], &[labels.len()]));
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Projects rows onto their top two principal axes (after centering).
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("pca", "no points"));
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("pca", "points need a common dimension ≥ 2"));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let col = eig.eigenvectors.column(k);
            // sign convention: largest-magnitude component positive
            let pivot = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap();
            let s = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            (0..d).map(|j| s * col[j]).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = (0..d).map(|j| centered[(i, j)]).collect();
            [
                crate::autodiff::kernels::dot(&row, &axes[0]),
                crate::autodiff::kernels::dot(&row, &axes[1]),
            ]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_alignment_tiles_frames() {
        let one_hot = |i: usize| {
            let mut r = vec![0.0; 3];
            r[i] = 1.0;
            r
        };
        let att: Vec<Vec<f64>> = [0, 0, 2, 1, 2].iter().map(|&i| one_hot(i)).collect();
        let segs = monotone_alignment(&att, 3).unwrap();
        crate::corpus::validate_alignment(&segs, 5).unwrap();
        assert_eq!(segs[0], Segment { start: 0, end: 2 });
        // stuck at phoneme 0: later phonemes still get one frame each
        let att: Vec<Vec<f64>> = (0..4).map(|_| one_hot(0)).collect();
        let segs = monotone_alignment(&att, 3).unwrap();
        assert_eq!(segs.iter().map(Segment::frames).collect::<Vec<_>>(), [2, 1, 1]);
        assert!(monotone_alignment(&att[..2], 3).is_err());
    }

    #[test]
    fn constant_frame_has_zero_cepstra() {
        let mel = Tensor::full(&[3, 16], 0.7);
        for row in mel_to_cepstra(&mel, 13).unwrap() {
            assert!(row.iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn mcd_identity_and_length_mismatch() {
        let mel = Tensor::new(vec![2, 16], (0..32).map(|i| 0.1 + i as f64 * 0.05).collect()).unwrap();
        assert_eq!(mcd(&mel, &mel, 13).unwrap(), 0.0);
        let short = Tensor::full(&[1, 16], 1.0);
        assert!(mcd(&mel, &short, 13).is_err());
    }

    #[test]
    fn mcd_uniform_offset_closed_form() {
        let delta = 0.3;
        let a = vec![vec![0.0; 13]; 4];
        let b = vec![vec![delta; 13]; 4];
        let expected = 10.0 / std::f64::consts::LN_10 * 26f64.sqrt() * delta;
        assert!((mcd_cepstra(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // hand evaluation: sxy = 3, sxx = 2, syy = 14/3
        let r = pearson(&x, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.98198).abs() < 1e-5);
        assert!(pearson(&x, &[2.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn silhouette_singletons_and_degenerate() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        // the singleton contributes 0
        let s = silhouette(&pts, &[0, 0, 1]).unwrap();
        let a = 1.0;
        let s0 = (5.0 - a) / 5.0;
        let s1 = (4.0 - a) / 4.0;
        assert!((s - (s0 + s1) / 3.0).abs() < 1e-12);
        let same = vec![vec![1.0, 1.0]; 4];
        assert_eq!(silhouette(&same, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(silhouette(&same, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn prosody_examples() {
        let mel = Tensor::full(&[6, 4], 2.0);
        let al = [Segment { start: 0, end: 4 }, Segment { start: 4, end: 6 }];
        let p = extract_prosody(&mel, &al, 12.5).unwrap();
        assert_eq!(p[0].duration_ms, 50.0);
        assert!(p.iter().all(|r| r.energy == 1.0 && r.f0 == 2.0));
        let bad = [Segment { start: 0, end: 7 }];
        assert!(extract_prosody(&mel, &bad, 12.5).is_err());
    }

    #[test]
    fn accuracy_and_tie_rule() {
        let logits = vec![vec![0.0, 2.0], vec![1.0, 0.0]];
        assert_eq!(classification_accuracy(&logits, &[1, 0]).unwrap(), 1.0);
        let uniform = vec![vec![0.0; 7]; 14];
        let labels: Vec<usize> = (0..14).map(|i| i % 7).collect();
        assert!((classification_accuracy(&uniform, &labels).unwrap() - 2.0 / 14.0).abs() < 1e-15);
        // a class that is never predicted still counts normally
        let logits = vec![vec![1.0, 0.0, 0.0]; 3];
        assert!((classification_accuracy(&logits, &[0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_durations() {
        let w = vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.8]];
        assert_eq!(durations_from_attention(&w, 2, 12.5), vec![25.0, 12.5]);
    }

    #[test]
    fn pca_of_2d_points_preserves_distances() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 1.0], vec![-1.0, 2.0], vec![4.0, -2.0], vec![0.5, 0.5]];
        let proj = pca_2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = euclid(&pts[i], &pts[j]);
                let d1 = euclid(&proj[i], &proj[j]);
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }
}
