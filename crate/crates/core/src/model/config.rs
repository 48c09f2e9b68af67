use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::chunking::ChunkGeometry;
use crate::error::{Error, Result};

pub const BLANK_SYMBOL: &str = "<blk>";
pub const UNK_SYMBOL: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    /// Raw feature width.
    pub d_in: usize,
    /// Encoder positions visible to the left of each node.
    pub left_context: usize,
    /// Chunk length `W` in encoded frames.
    pub chunk_len: usize,
    /// Overlap `B` between adjacent chunks in encoded frames.
    pub overlap: usize,
    /// Output classes including blank and unk.
    pub vocab_size: usize,
    /// Width of the gated feed-forward layer (after gating).
    pub ffn_inner: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            d_in: 16,
            left_context: 8,
            chunk_len: 4,
            overlap: 1,
            vocab_size: 16,
            ffn_inner: 128,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_in == 0 || self.ffn_inner == 0 {
            return Err(Error::Config("d_in and ffn_inner must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for symbols besides blank and unk",
                self.vocab_size
            )));
        }
        self.geometry()?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<ChunkGeometry> {
        ChunkGeometry::new(self.chunk_len, self.overlap)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Symbol ↔ id table. Id 0 is the blank (which doubles as the start symbol)
/// and id 1 is the unknown symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const BLANK: usize = 0;
    pub const UNK: usize = 1;

    /// `symbols[0]` must be the blank and `symbols[1]` the unknown symbol.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 3 {
            return Err(Error::Config("vocabulary needs blank, unk and at least one symbol".into()));
        }
        if symbols[0] != BLANK_SYMBOL || symbols[1] != UNK_SYMBOL {
            return Err(Error::Config(format!("vocabulary must start with {BLANK_SYMBOL:?}, {UNK_SYMBOL:?}")));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols, index })
    }

    /// Blank, unk, then `size - 2` single-character symbols `a`, `b`, ….
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(Error::Config(format!("synthetic vocabulary of size {size}")));
        }
        let mut symbols = vec![BLANK_SYMBOL.to_string(), UNK_SYMBOL.to_string()];
        symbols.extend((0..size - 2).map(|i| char::from_u32(0x61 + i as u32).map_or(format!("#{i}"), String::from)));
        Vocabulary::new(symbols)
    }

    /// Blank, unk, then every distinct non-whitespace character in sorted order.
    pub fn from_transcripts<'t>(transcripts: impl IntoIterator<Item = &'t str>) -> Result<Self> {
        let mut chars: Vec<char> =
            transcripts.into_iter().flat_map(str::chars).filter(|c| !c.is_whitespace()).collect();
        chars.sort_unstable();
        chars.dedup();
        let mut symbols = vec![BLANK_SYMBOL.to_string(), UNK_SYMBOL.to_string()];
        symbols.extend(chars.into_iter().map(String::from));
        Vocabulary::new(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        Self::BLANK
    }

    pub fn unk_id(&self) -> usize {
        Self::UNK
    }

    /// The start symbol `y_0` is the blank.
    pub fn start_id(&self) -> usize {
        Self::BLANK
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Maps each non-whitespace character to an id; unknown characters map to unk.
    pub fn encode(&self, transcript: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        transcript
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(Self::UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i).unwrap_or(UNK_SYMBOL)).collect()
    }
}
