//! `EMOCKPT1` checkpoints.
//!
//! ```text
//! "EMOCKPT1"      8 bytes magic
//! u32 LE          header length H
//! H bytes         JSON header (CheckpointHeader)
//! f64 LE blobs    every parameter, then Adam first moments, then second
//!                 moments, each in header order and row-major
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"EMOCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: SystemConfig,
    pub step: u64,
    pub adam_step: u64,
    pub adam: AdamConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        let p = &tr.model.params;
        Checkpoint {
            header: CheckpointHeader {
                version: VERSION,
                config: tr.model.config.clone(),
                step: tr.step,
                adam_step: tr.adam.step,
                adam: tr.adam.config,
                params: p
                    .names()
                    .iter()
                    .zip(p.tensors())
                    .map(|(name, t)| ParamEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            },
            params: p.tensors().to_vec(),
            adam_m: tr.adam.m.clone(),
            adam_v: tr.adam.v.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("header serializes");
        let n: usize = self.params.iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 24 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let blobs = self
            .params
            .iter()
            .map(Tensor::data)
            .chain(self.adam_m.iter().map(Vec::as_slice))
            .chain(self.adam_v.iter().map(Vec::as_slice));
        for blob in blobs {
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Parse {
            offset: offset as u64,
            record: None,
            msg,
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err(0, "bad magic, expected EMOCKPT1".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hend = 12 + hlen;
        if bytes.len() < hend {
            return Err(err(12, format!("truncated header: need {hlen} bytes")));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[12..hend]).map_err(|e| err(12, format!("header JSON: {e}")))?;
        if header.version != VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: VERSION,
            });
        }
        let sizes: Vec<usize> = header.params.iter().map(|p| p.shape.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        let need = hend + 3 * total * 8;
        if bytes.len() != need {
            let at = bytes.len().min(need);
            return Err(err(at, format!("blob section is {} bytes, expected {}", bytes.len() - hend, need - hend)));
        }
        let mut pos = hend;
        let mut read_blob = |n: usize| -> Vec<f64> {
            let v = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            v
        };
        let params = header
            .params
            .iter()
            .zip(&sizes)
            .map(|(p, &n)| Tensor::new(p.shape.clone(), read_blob(n)))
            .collect::<Result<Vec<_>>>()?;
        let adam_m = sizes.iter().map(|&n| read_blob(n)).collect();
        let adam_v = sizes.iter().map(|&n| read_blob(n)).collect();
        Ok(Checkpoint {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes atomically: a sibling temp file is renamed over `path`, so an
    /// earlier checkpoint at `path` survives a failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn names(&self) -> Vec<String> {
        self.header.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Builds the model described by the stored config and loads the parameters.
    pub fn to_model(&self) -> Result<Model> {
        self.to_model_with(&self.header.config)
    }

    /// Loads the stored parameters into a model built from `config`; the
    /// parameter sets must match exactly.
    pub fn to_model_with(&self, config: &SystemConfig) -> Result<Model> {
        let mut model = Model::new(config)?;
        model.params.load_from(&self.names(), self.params.clone())?;
        Ok(model)
    }

    pub fn to_trainer(&self, exec: Exec) -> Result<Trainer> {
        let model = self.to_model()?;
        let mut tr = Trainer::new(model, exec);
        tr.step = self.header.step;
        tr.adam = AdamState {
            config: self.header.adam,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
            step: self.header.adam_step,
        };
        Ok(tr)
    }
}
