//! Fixed language-model states joined onto token sequences, and the binary
//! file that carries them.

pub mod toy;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LM_MAGIC: &[u8; 8] = b"CTXQALMS";
pub const LM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmLayer {
    Emb,
    L1,
    L2,
}

impl LmLayer {
    pub const ALL: [LmLayer; 3] = [LmLayer::Emb, LmLayer::L1, LmLayer::L2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LmLayer::Emb => "emb",
            LmLayer::L1 => "l1",
            LmLayer::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqKind {
    Question = 0,
    Passage = 1,
}

impl SeqKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SeqKind::Question),
            1 => Some(SeqKind::Passage),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SeqKind::Question => "question",
            SeqKind::Passage => "passage",
        }
    }
}

/// Per-layer vector widths `(emb, L1, L2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmDims {
    pub emb: usize,
    pub l1: usize,
    pub l2: usize,
}

impl LmDims {
    pub fn get(&self, layer: LmLayer) -> usize {
        [self.emb, self.l1, self.l2][layer.index()]
    }
}

/// States of one sequence: for each layer a `tokens x dim` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LmRecord {
    pub example_id: String,
    pub kind: SeqKind,
    pub tokens: usize,
    pub layers: [Vec<f32>; 3],
}

impl LmRecord {
    pub fn layer(&self, layer: LmLayer) -> &[f32] {
        &self.layers[layer.index()]
    }
}

struct CountingWriter<W> {
    inner: W,
    offset: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(bytes)?;
        self.offset += bytes.len() as u64;
        Ok(())
    }

    fn put_u32(&mut self, v: usize) -> std::io::Result<()> {
        self.put(&(v as u32).to_le_bytes())
    }
}

/// Serializes `records`. Every record must match `dims`.
pub fn write_lm_states<W: Write>(w: W, dims: LmDims, records: &[LmRecord]) -> Result<()> {
    let io = |e| Error::io("<lm states>", e);
    let mut w = CountingWriter { inner: w, offset: 0 };
    w.put(LM_MAGIC).map_err(io)?;
    w.put(&LM_VERSION.to_le_bytes()).map_err(io)?;
    for d in [dims.emb, dims.l1, dims.l2] {
        w.put_u32(d).map_err(io)?;
    }
    w.put(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for rec in records {
        for layer in LmLayer::ALL {
            let expected = rec.tokens * dims.get(layer);
            if rec.layer(layer).len() != expected {
                return Err(Error::Format {
                    offset: w.offset,
                    msg: format!(
                        "record {}/{} has {} values in layer {}, expected {}",
                        rec.example_id,
                        rec.kind.as_str(),
                        rec.layer(layer).len(),
                        layer.as_str(),
                        expected
                    ),
                });
            }
        }
        w.put_u32(rec.example_id.len()).map_err(io)?;
        w.put(rec.example_id.as_bytes()).map_err(io)?;
        w.put(&[rec.kind as u8]).map_err(io)?;
        w.put_u32(rec.tokens).map_err(io)?;
        for m in &rec.layers {
            let mut buf = Vec::with_capacity(m.len() * 4);
            for v in m {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.put(&buf).map_err(io)?;
        }
    }
    w.inner.flush().map_err(io)
}

pub fn write_lm_states_file(path: impl AsRef<Path>, dims: LmDims, records: &[LmRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_lm_states(BufWriter::new(f), dims, records)
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: at,
                msg: format!("file truncated while reading {what}"),
            }),
            Err(e) => Err(Error::io("<lm states>", e)),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut out = vec![0f32; n];
        let mut chunk = [0u8; 4096];
        let mut done = 0;
        while done < n {
            let take = (n - done).min(chunk.len() / 4);
            self.fill(&mut chunk[..take * 4], what)?;
            for (k, b) in chunk[..take * 4].chunks_exact(4).enumerate() {
                out[done + k] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            done += take;
        }
        Ok(out)
    }
}

/// Loaded LM states indexed by `(example id, sequence kind)`. Immutable.
#[derive(Debug, Clone, Default)]
pub struct LmStore {
    dims: Option<LmDims>,
    records: HashMap<(String, SeqKind), LmRecord>,
}

impl LmStore {
    pub fn dims(&self) -> Option<LmDims> {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, example_id: &str, kind: SeqKind) -> Result<&LmRecord> {
        self.records
            .get(&(example_id.to_string(), kind))
            .ok_or_else(|| Error::NotFound(format!("lm states for ({example_id}, {})", kind.as_str())))
    }

    /// Selected-layer vectors for a sequence of `tokens` tokens, as a
    /// constant `tokens x dim` tensor.
    pub fn join(&self, example_id: &str, kind: SeqKind, tokens: usize, layer: LmLayer) -> Result<Tensor> {
        let rec = self.get(example_id, kind)?;
        if rec.tokens != tokens {
            return Err(Error::Alignment {
                example_id: example_id.to_string(),
                msg: format!(
                    "{} has {} tokens but lm states cover {}",
                    kind.as_str(),
                    tokens,
                    rec.tokens
                ),
            });
        }
        let dim = self.dims.map_or(0, |d| d.get(layer));
        let data = rec.layer(layer).iter().map(|&v| v as f64).collect();
        Ok(Tensor::new(vec![tokens, dim], data)?)
    }

    pub fn records(&self) -> impl Iterator<Item = &LmRecord> {
        self.records.values()
    }
}

pub fn read_lm_states<R: Read>(r: R) -> Result<LmStore> {
    let mut r = CountingReader { inner: r, offset: 0 };
    let mut magic = [0u8; 8];
    r.fill(&mut magic, "magic")?;
    if &magic != LM_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not an lm-state file (bad magic)".into(),
        });
    }
    let version = r.u32("version")? as u32;
    if version != LM_VERSION {
        return Err(Error::Version(format!("lm-state file version {version}, expected {LM_VERSION}")));
    }
    let dims = LmDims {
        emb: r.u32("emb dim")?,
        l1: r.u32("L1 dim")?,
        l2: r.u32("L2 dim")?,
    };
    let count = r.u64("record count")?;
    let mut records = HashMap::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let at = r.offset;
        let id_len = r.u32("example id length")?;
        let mut id = vec![0u8; id_len];
        r.fill(&mut id, "example id")?;
        let example_id = String::from_utf8(id).map_err(|_| Error::Format {
            offset: at + 4,
            msg: "example id is not utf-8".into(),
        })?;
        let mut kind = [0u8; 1];
        r.fill(&mut kind, "sequence kind")?;
        let kind = SeqKind::from_byte(kind[0]).ok_or_else(|| Error::Format {
            offset: r.offset - 1,
            msg: format!("unknown sequence kind {}", kind[0]),
        })?;
        let tokens = r.u32("token count")?;
        let layers = [
            r.f32s(tokens * dims.emb, "emb layer")?,
            r.f32s(tokens * dims.l1, "L1 layer")?,
            r.f32s(tokens * dims.l2, "L2 layer")?,
        ];
        let key = (example_id.clone(), kind);
        if records.contains_key(&key) {
            return Err(Error::Duplicate(format!("lm states for ({example_id}, {}) at byte {at}", kind.as_str())));
        }
        records.insert(
            key,
            LmRecord {
                example_id,
                kind,
                tokens,
                layers,
            },
        );
    }
    Ok(LmStore {
        dims: Some(dims),
        records,
    })
}

pub fn load_lm_states(path: impl AsRef<Path>) -> Result<LmStore> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_lm_states(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> LmDims {
        LmDims { emb: 2, l1: 3, l2: 1 }
    }

    fn record(id: &str, kind: SeqKind, tokens: usize, seed: f32) -> LmRecord {
        let d = dims();
        let fill = |n: usize, k: f32| (0..n).map(|i| seed + k * i as f32 * 0.25).collect();
        LmRecord {
            example_id: id.into(),
            kind,
            tokens,
            layers: [fill(tokens * d.emb, 1.0), fill(tokens * d.l1, -1.0), fill(tokens * d.l2, 0.5)],
        }
    }

    fn bytes(records: &[LmRecord]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_lm_states(&mut buf, dims(), records).unwrap();
        buf
    }

    #[test]
    fn single_record_round_trips() {
        let rec = record("q1", SeqKind::Question, 3, 0.1);
        let store = read_lm_states(bytes(std::slice::from_ref(&rec)).as_slice()).unwrap();
        assert_eq!(store.get("q1", SeqKind::Question).unwrap(), &rec);
        let t = store.join("q1", SeqKind::Question, 3, LmLayer::Emb).unwrap();
        assert_eq!(t.shape, vec![3, 2]);
        let back: Vec<f32> = t.data.iter().map(|&v| v as f32).collect();
        assert_eq!(back, rec.layers[0]);
    }

    #[test]
    fn empty_file_is_valid() {
        let store = read_lm_states(bytes(&[]).as_slice()).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.dims(), Some(dims()));
    }

    #[test]
    fn inconsistent_dims_are_a_format_error() {
        let mut bad = record("q1", SeqKind::Question, 2, 0.0);
        bad.layers[1].pop();
        let mut buf = Vec::new();
        let err = write_lm_states(&mut buf, dims(), &[bad]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 32, .. }), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let full = bytes(&[record("p", SeqKind::Passage, 2, 1.0)]);
        let cut = &full[..full.len() - 3];
        match read_lm_states(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 32 && offset < full.len() as u64),
            other => panic!("expected a format error, got {other:?}"),
        }
        assert!(matches!(read_lm_states(&full[..10]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let r = record("x", SeqKind::Passage, 1, 0.0);
        let err = read_lm_states(bytes(&[r.clone(), r]).as_slice()).unwrap_err();
        assert!(matches!(err, Error::Duplicate(_)));
    }

    #[test]
    fn absent_key_and_count_mismatch() {
        let store = read_lm_states(bytes(&[record("q7", SeqKind::Question, 3, 0.0)]).as_slice()).unwrap();
        let err = store.get("q7", SeqKind::Passage).unwrap_err();
        assert!(err.to_string().contains("q7") && err.to_string().contains("passage"));
        match store.join("q7", SeqKind::Question, 4, LmLayer::L1) {
            Err(Error::Alignment { example_id, .. }) => assert_eq!(example_id, "q7"),
            other => panic!("expected an alignment error, got {other:?}"),
        }
    }
}
