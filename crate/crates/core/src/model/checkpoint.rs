//! Binary checkpoint format.
//!
//! ```text
//! magic "VLPXCKPT" | u32 version
//! str config | str vocabulary
//! u32 count | count × (str name | u32 rank | rank × u64 dim | f64 values)
//! u8 has_state | [str meta | str log | u32 count | named tensors as above]
//! ```
//! Integers and floats are little-endian; `str` is a u32 byte length then
//! UTF-8 bytes.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VLPXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer and bookkeeping state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub meta: KvMap,
    pub log: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Vec<(String, Tensor)>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocabulary, state: Option<TrainState>) -> Self {
        Self {
            config: model.config().clone(),
            vocab: vocab.clone(),
            params: model
                .params()
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            state,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut w, &self.config.to_kv().to_text());
        put_str(&mut w, &self.vocab.to_text());
        put_tensors(&mut w, &self.params);
        match &self.state {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                put_str(&mut w, &s.meta.to_text());
                put_str(&mut w, &s.log);
                put_tensors(&mut w, &s.tensors);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptData {
            record: origin.to_string(),
            reason,
        };
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(&corrupt)? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let version = r.u32().map_err(&corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let config_text = r.string().map_err(&corrupt)?;
        let config = ModelConfig::from_kv(&KvMap::parse(&config_text)?, &ModelConfig::default())?;
        let vocab = Vocabulary::from_text(&r.string().map_err(&corrupt)?)?;
        let params = r.tensors().map_err(&corrupt)?;
        let state = match r.take(1).map_err(&corrupt)?[0] {
            0 => None,
            1 => Some(TrainState {
                meta: KvMap::parse(&r.string().map_err(&corrupt)?)?,
                log: r.string().map_err(&corrupt)?,
                tensors: r.tensors().map_err(&corrupt)?,
            }),
            b => return Err(corrupt(format!("bad state flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            vocab,
            params,
            state,
        })
    }
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_tensors(w: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    w.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_str(w, name);
        w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            w.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("unexpected end of file at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }

    fn tensors(&mut self) -> std::result::Result<Vec<(String, Tensor)>, String> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= self.buf.len() / 8).ok_or("tensor too large")?;
            let data = self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
