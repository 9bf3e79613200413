//! Per-utterance latent means with a 2-D PCA projection.
//!
//! CSV columns: `id,emotion,pc1,pc2,mu0,…,mu{d-1}`.

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub emotion: Emotion,
    pub pc: [f64; 2],
    pub mu: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub system: String,
    pub count: usize,
    pub latent_dim: usize,
    pub silhouette: f64,
    pub mean_mu_norm: f64,
}

impl EmbeddingSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub rows: Vec<EmbeddingRow>,
    pub summary: EmbeddingSummary,
}

pub fn embed_corpus(model: &Model, utts: &[Utterance], exec: Exec) -> Result<Embeddings> {
    if utts.is_empty() {
        return Err(Error::invalid("embed", "empty corpus"));
    }
    let mus = exec
        .map(utts, |_, u| model.embed(&u.mel))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = utts.iter().map(|u| u.emotion.index()).collect();
    let silhouette = metrics::silhouette(&mus, &labels)?;
    let pcs = metrics::pca_2d(&mus)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mean_mu_norm = mus.iter().map(|m| norm(m)).sum::<f64>() / mus.len() as f64;
    let summary = EmbeddingSummary {
        system: model.variant().name().to_string(),
        count: utts.len(),
        latent_dim: model.latent_dim(),
        silhouette,
        mean_mu_norm,
    };
    let rows = utts
        .iter()
        .zip(mus)
        .zip(pcs)
        .map(|((u, mu), pc)| EmbeddingRow {
            id: u.id.clone(),
            emotion: u.emotion,
            pc,
            mu,
        })
        .collect();
    Ok(Embeddings { rows, summary })
}

pub fn to_csv(rows: &[EmbeddingRow]) -> String {
    let dim = rows.first().map_or(0, |r| r.mu.len());
    let mut s = String::from("id,emotion,pc1,pc2");
    for i in 0..dim {
        s.push_str(&format!(",mu{i}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{:?},{:?}", r.id, r.emotion, r.pc[0], r.pc[1]));
        for v in &r.mu {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    s
}

pub fn from_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines();
    let mut offset = 0u64;
    let header = lines.next().ok_or_else(|| parse_err(0, None, "empty embedding file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..4] != ["id", "emotion", "pc1", "pc2"] {
        return Err(parse_err(0, None, "header must start with id,emotion,pc1,pc2"));
    }
    offset += header.len() as u64 + 1;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let at = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(parse_err(at, Some(i), &format!("{} fields, header has {}", f.len(), cols.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(at, Some(i), &format!("bad number {s:?}")))
        };
        let emotion: Emotion = f[1].parse().map_err(|_| parse_err(at, Some(i), &format!("unknown emotion {:?}", f[1])))?;
        rows.push(EmbeddingRow {
            id: f[0].to_string(),
            emotion,
            pc: [num(f[2])?, num(f[3])?],
            mu: f[4..].iter().map(|s| num(s)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn parse_err(offset: u64, record: Option<usize>, msg: &str) -> Error {
    Error::Parse {
        offset,
        record,
        msg: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            EmbeddingRow {
                id: "a".into(),
                emotion: Emotion::Sad,
                pc: [0.1, -2.5],
                mu: vec![1.0 / 3.0, 2.0],
            },
            EmbeddingRow {
                id: "b".into(),
                emotion: Emotion::Happy,
                pc: [3.0, 1e-17],
                mu: vec![-0.0, 7.25],
            },
        ];
        assert_eq!(from_csv(&to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn malformed_rows_are_parse_errors() {
        assert!(matches!(from_csv(""), Err(Error::Parse { .. })));
        let bad = "id,emotion,pc1,pc2,mu0\nx,sad,1,2\n";
        assert!(matches!(from_csv(bad), Err(Error::Parse { record: Some(0), .. })));
        let bad = "id,emotion,pc1,pc2\nx,bored,1,2\n";
        assert!(matches!(from_csv(bad), Err(Error::Parse { .. })));
    }
}
