//! `EMOC1` corpus files.
//!
//! ```text
//! "EMOC1"                  5 bytes magic
//! u32 LE                   header length H
//! H bytes                  JSON header (CorpusHeader)
//! records, each:
//!   u32 LE                 payload length P
//!   P bytes payload:
//!     u16 LE + bytes       utterance id (UTF-8)
//!     u8                   emotion index
//!     u32 LE               phoneme count N
//!     N bytes × 3          phone ids, tone ids, boundary levels
//!     u32 LE, u32 LE       frame count T, band count B
//!     T·B f64 LE           mel, row-major
//!     N × (u32 LE, u32 LE) alignment [start, end)
//! ```
//! The header's `count` must equal the number of records.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmotionProfile, Segment, Text, Utterance, BOUNDARY_LEVELS, PHONE_VOCAB, TONE_VOCAB};
use crate::autodiff::Tensor;
use crate::emotion::Emotion;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"EMOC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub phone_vocab: usize,
    pub tone_vocab: usize,
    pub boundary_levels: usize,
    pub bands: usize,
    pub hop_ms: f64,
    pub profiles: Vec<EmotionProfile>,
    pub count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CorpusHeader {
    pub fn new(bands: usize, hop_ms: f64, profiles: Vec<EmotionProfile>, count: usize, seed: Option<u64>) -> Self {
        CorpusHeader {
            phone_vocab: PHONE_VOCAB,
            tone_vocab: TONE_VOCAB,
            boundary_levels: BOUNDARY_LEVELS,
            bands,
            hop_ms,
            profiles,
            count,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFile {
    pub header: CorpusHeader,
    pub utterances: Vec<Utterance>,
}

fn encode_record(u: &Utterance, out: &mut Vec<u8>) {
    let id = u.id.as_bytes();
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.push(u.emotion.index() as u8);
    out.extend_from_slice(&(u.text.len() as u32).to_le_bytes());
    for seq in [&u.text.phones, &u.text.tones, &u.text.boundaries] {
        out.extend(seq.iter().map(|&v| v as u8));
    }
    out.extend_from_slice(&(u.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(u.bands() as u32).to_le_bytes());
    for v in u.mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &u.alignment {
        out.extend_from_slice(&(s.start as u32).to_le_bytes());
        out.extend_from_slice(&(s.end as u32).to_le_bytes());
    }
}

/// Serializes a corpus into `EMOC1` bytes.
pub fn encode_corpus(header: &CorpusHeader, utterances: &[Utterance]) -> Vec<u8> {
    let mut header = header.clone();
    header.count = utterances.len();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(64 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut rec = Vec::new();
    for u in utterances {
        rec.clear();
        encode_record(u, &mut rec);
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

pub fn write_corpus(path: &Path, header: &CorpusHeader, utterances: &[Utterance]) -> Result<()> {
    let bytes = encode_corpus(header, utterances);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<CorpusFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: Option<usize>,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            record: self.record,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<CorpusFile> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        record: None,
    };
    if r.take(MAGIC.len())? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected EMOC1"));
    }
    let hlen = r.u32()? as usize;
    let hstart = r.pos;
    let header: CorpusHeader = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Parse {
        offset: hstart as u64,
        record: None,
        msg: format!("header JSON: {e}"),
    })?;
    let mut utterances = Vec::with_capacity(header.count);
    while r.pos < bytes.len() {
        r.record = Some(utterances.len());
        let len = r.u32()? as usize;
        let start = r.pos;
        r.take(len)?;
        r.pos = start;
        let u = decode_record(&mut r, &header)?;
        if r.pos != start + len {
            return Err(r.err(format!("record length {len} disagrees with contents ({})", r.pos - start)));
        }
        utterances.push(u);
    }
    if utterances.len() != header.count {
        r.record = None;
        return Err(r.err(format!("header declares {} records, found {}", header.count, utterances.len())));
    }
    Ok(CorpusFile { header, utterances })
}

fn decode_record(r: &mut Reader<'_>, header: &CorpusHeader) -> Result<Utterance> {
    let id_len = r.u16()? as usize;
    let id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| r.err("id is not UTF-8"))?
        .to_string();
    let e = r.u8()? as usize;
    let emotion = Emotion::from_index(e).ok_or_else(|| r.err(format!("emotion index {e} out of range")))?;
    let n = r.u32()? as usize;
    let mut seqs = Vec::with_capacity(3);
    for _ in 0..3 {
        seqs.push(r.take(n)?.iter().map(|&b| b as usize).collect::<Vec<_>>());
    }
    let boundaries = seqs.pop().unwrap();
    let tones = seqs.pop().unwrap();
    let phones = seqs.pop().unwrap();
    let text = Text {
        phones,
        tones,
        boundaries,
    };
    let t = r.u32()? as usize;
    let b = r.u32()? as usize;
    if b != header.bands {
        return Err(r.err(format!("record has {b} bands, header says {}", header.bands)));
    }
    let mut mel = Vec::with_capacity(t * b);
    for _ in 0..t * b {
        mel.push(r.f64()?);
    }
    let mut alignment = Vec::with_capacity(n);
    for _ in 0..n {
        let start = r.u32()? as usize;
        let end = r.u32()? as usize;
        alignment.push(Segment { start, end });
    }
    let mel = Tensor::new(vec![t, b], mel).map_err(|e| r.err(e.to_string()))?;
    let u = Utterance {
        id,
        text,
        emotion,
        mel,
        alignment,
    };
    u.validate().map_err(|e| r.err(e.to_string()))?;
    Ok(u)
}
