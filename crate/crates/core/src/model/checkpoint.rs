//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic    "PSPT"
//! version  u32
//! config   6 × u32: vocab_size dim n_layers n_heads max_seq_len ffn_mult
//! vocab    u32 count, then per token: u32 byte length + UTF-8 bytes
//! scalars  u32 count, then per scalar: u32 name length + name + f64
//! index    u32 count, then per buffer: u32 name length + name,
//!          u32 ndim, ndim × u32 dims, u64 element offset into the payload
//! payload  u64 element count, then f32 values
//! ```

use std::path::Path;

use super::{MicroLM, ModelConfig, ModelParams, Vocabulary};
use crate::error::{PsptError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub scalars: Vec<(String, f64)>,
    pub buffers: Vec<(String, Tensor<f32>)>,
}

fn fmt_err(field: &str, detail: impl Into<String>) -> PsptError {
    PsptError::CheckpointFormat {
        field: field.to_string(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(fmt_err(field, "truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| fmt_err(field, "invalid UTF-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &MicroLM<f32>) -> Self {
        Checkpoint {
            config: *model.config(),
            vocab: model.vocab().clone(),
            scalars: Vec::new(),
            buffers: model
                .params()
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<f32>> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor<f32>) {
        match self.buffers.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.buffers.push((name.to_string(), t)),
        }
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        match self.scalars.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = v,
            None => self.scalars.push((name.to_string(), v)),
        }
    }

    /// Rebuilds the frozen model from the named model buffers.
    pub fn model(&self) -> Result<MicroLM<f32>> {
        let mut params = ModelParams::<f32>::init(&self.config, &mut crate::tensor::SeededRng::new(0));
        for (name, slot) in params.named_mut() {
            let t = self
                .buffer(&name)
                .ok_or_else(|| fmt_err("index", format!("missing buffer {name}")))?;
            if t.shape() != slot.shape() {
                return Err(fmt_err(
                    "index",
                    format!("buffer {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        MicroLM::from_parts(self.config, self.vocab.clone(), params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.vocab_size, c.dim, c.n_layers, c.n_heads, c.max_seq_len, c.ffn_mult] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in self.vocab.tokens() {
            put_str(&mut out, t);
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_str(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.buffers {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.buffers {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(fmt_err("magic", "expected \"PSPT\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(PsptError::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mut dims = [0usize; 6];
        for (slot, name) in dims.iter_mut().zip([
            "config.vocab_size",
            "config.dim",
            "config.n_layers",
            "config.n_heads",
            "config.max_seq_len",
            "config.ffn_mult",
        ]) {
            *slot = r.u32(name)? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            dim: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            max_seq_len: dims[4],
            ffn_mult: dims[5],
        };
        config
            .validate()
            .map_err(|e| fmt_err("config", e.to_string()))?;
        let n_vocab = r.u32("vocab")? as usize;
        if n_vocab != config.vocab_size {
            return Err(fmt_err(
                "vocab",
                format!("{n_vocab} entries but config says {}", config.vocab_size),
            ));
        }
        let tokens = (0..n_vocab)
            .map(|_| r.string("vocab"))
            .collect::<Result<Vec<_>>>()?;
        let vocab =
            Vocabulary::from_full_list(tokens).map_err(|e| fmt_err("vocab", e.to_string()))?;
        let n_scalars = r.u32("scalars")? as usize;
        let mut scalars = Vec::with_capacity(n_scalars);
        for _ in 0..n_scalars {
            let name = r.string("scalars")?;
            scalars.push((name, r.f64("scalars")?));
        }
        let n_buffers = r.u32("index")? as usize;
        let mut index = Vec::with_capacity(n_buffers);
        for _ in 0..n_buffers {
            let name = r.string("index")?;
            let ndim = r.u32("index")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("index").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64("index")? as usize;
            index.push((name, shape, offset));
        }
        let total = r.u64("payload")? as usize;
        let raw = r.take(
            total.checked_mul(4).ok_or_else(|| fmt_err("payload", "size overflow"))?,
            "payload",
        )?;
        if r.pos != bytes.len() {
            return Err(fmt_err("payload", "trailing bytes"));
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut buffers = Vec::with_capacity(index.len());
        for (name, shape, offset) in index {
            let numel: usize = shape.iter().product();
            let end = offset
                .checked_add(numel)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| fmt_err("index", format!("buffer {name} exceeds payload")))?;
            let t = Tensor::new(shape, payload[offset..end].to_vec())?;
            buffers.push((name, t));
        }
        Ok(Checkpoint {
            config,
            vocab,
            scalars,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| PsptError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PsptError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(model: &MicroLM<f32>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<MicroLM<f32>> {
    Checkpoint::load(path)?.model()
}
