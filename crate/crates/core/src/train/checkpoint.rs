//! Binary checkpoint container. All integers and floats are little-endian.
//!
//! ```text
//! magic "SYNCTFCK" | version u32 | config_len u32 | config JSON
//! | n_symbols u32 | (len u32, utf-8 bytes)*
//! | n_tensors u32 | (name_len u32, name, rank u32, dims u64*, data f64*)*
//! | has_optimizer u8 | [step u64 | (m f64*, v f64*) per tensor]
//! ```

use std::fs;
use std::path::Path;

use super::AdamState;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, ParamStore, SyncTransformer, Vocabulary};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNCTFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: &SyncTransformer, vocab: &Vocabulary, optimizer: Option<&AdamState>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            vocab: vocab.clone(),
            params: model.params().clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn into_model(self) -> Result<(SyncTransformer, Vocabulary, Option<AdamState>)> {
        let model = SyncTransformer::from_params(self.config, self.params)?;
        Ok((model, self.vocab, self.optimizer))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        put_bytes(&mut out, &config);
        put_u32(&mut out, self.vocab.len() as u32);
        for s in self.vocab.symbols() {
            put_bytes(&mut out, s.as_bytes());
        }
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                for (m, v) in st.m.iter().zip(&st.v) {
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() >= CHECKPOINT_MAGIC.len() && &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::CorruptHeader("bad magic".into()).into());
        }
        r.take(CHECKPOINT_MAGIC.len())?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION }.into());
        }
        let config_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| CheckpointError::CorruptHeader(format!("config: {e}")))?;

        let n_symbols = r.u32()? as usize;
        let mut symbols = Vec::with_capacity(n_symbols.min(1 << 16));
        for _ in 0..n_symbols {
            symbols.push(r.string()?);
        }
        let vocab = Vocabulary::new(symbols).map_err(|e| CheckpointError::CorruptBody(e.to_string()))?;

        let n_tensors = r.u32()? as usize;
        let mut names = Vec::with_capacity(n_tensors.min(1 << 12));
        let mut tensors = Vec::with_capacity(n_tensors.min(1 << 12));
        for _ in 0..n_tensors {
            names.push(r.string()?);
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::CorruptBody("tensor size overflows".into()))?;
            let data = r.f64s(n)?;
            tensors.push(Tensor::new(shape, data)?);
        }
        let params = ParamStore::from_parts(names, tensors)?;

        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for t in params.tensors() {
                    m.push(r.f64s(t.numel())?);
                    v.push(r.f64s(t.numel())?);
                }
                Some(AdamState { step, m, v })
            }
            b => return Err(CheckpointError::CorruptBody(format!("optimizer flag {b}")).into()),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::CorruptBody(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        Ok(Checkpoint { config, vocab, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Checkpoint(CheckpointError::Truncated))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::CorruptBody("invalid utf-8 string".into()).into())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or(Error::Checkpoint(CheckpointError::Truncated))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
