use std::cell::Cell;
use std::ops::Range;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BeamConfig, BeamSearch, ChunkScorer, Decoded, ModelScorer};
use crate::chunking::StreamBuffer;
use crate::error::{Error, Result};
use crate::model::{DecoderState, SyncTransformer};
use crate::tensor::Tensor;

pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// Milliseconds since construction.
#[derive(Clone, Debug)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

/// Clock driven by the caller. Clones share the same time.
#[derive(Clone, Debug, Default)]
pub struct ManualClock {
    now: Rc<Cell<f64>>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, ms: f64) {
        self.now.set(ms);
    }

    pub fn advance(&self, ms: f64) {
        self.now.set(self.now.get() + ms);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> f64 {
        self.now.get()
    }
}

/// One committed output symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    /// Chunk whose decoding committed the symbol.
    pub chunk_index: usize,
    pub symbol: usize,
    /// Log-probability of the best hypothesis when the symbol was committed.
    pub cumulative_log_prob: f64,
    pub wall_clock_ms: f64,
    /// Raw frames received when the symbol was committed.
    pub raw_frames_seen: usize,
}

impl Emission {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("emission serializes")
    }
}

/// Incremental beam decoder. Symbols are emitted once every hypothesis in the
/// beam agrees on them, so the concatenated emissions equal the offline
/// result.
pub struct StreamDecoder<'m> {
    model: &'m SyncTransformer,
    buffer: StreamBuffer,
    scorer: ModelScorer<'m>,
    search: BeamSearch<DecoderState>,
    committed: usize,
    clock: Box<dyn Clock + 'm>,
    done: bool,
}

impl<'m> StreamDecoder<'m> {
    pub fn new(model: &'m SyncTransformer, cfg: BeamConfig, clock: Box<dyn Clock + 'm>) -> Result<Self> {
        let scorer = ModelScorer::new(model);
        let search = BeamSearch::new(scorer.initial_state(), cfg)?;
        let buffer = StreamBuffer::new(model.geometry(), model.front_end_geometry(), model.config().d_in);
        Ok(StreamDecoder { model, buffer, scorer, search, committed: 0, clock, done: false })
    }

    pub fn raw_frames_seen(&self) -> usize {
        self.buffer.raw_len()
    }

    pub fn chunks_decoded(&self) -> usize {
        self.search.chunks_done()
    }

    /// Appends row-major raw frames and returns the symbols that became final.
    pub fn push(&mut self, frames: &[f64]) -> Result<Vec<Emission>> {
        if self.done {
            return Err(Error::Protocol("push after finish".into()));
        }
        let ranges = self.buffer.push_frames(frames)?;
        self.decode_ranges(ranges)?;
        Ok(self.commit(false))
    }

    /// Ends the stream, decodes the remaining chunks and returns the last
    /// emissions together with the final n-best list.
    pub fn finish(&mut self) -> Result<(Vec<Emission>, Vec<Decoded>)> {
        if self.done {
            return Err(Error::Protocol("finish called twice".into()));
        }
        self.done = true;
        let ranges = self.buffer.flush()?;
        self.decode_ranges(ranges)?;
        let emissions = self.commit(true);
        let nbest =
            self.search.beam().iter().map(|h| Decoded { symbols: h.prefix.clone(), log_prob: h.log_prob }).collect();
        Ok((emissions, nbest))
    }

    fn decode_ranges(&mut self, ranges: Vec<(usize, Range<usize>)>) -> Result<()> {
        if ranges.is_empty() {
            return Ok(());
        }
        let d_in = self.model.config().d_in;
        let raw = self.buffer.raw_len();
        let x = Tensor::new(vec![raw, d_in], self.buffer.frames().to_vec())?;
        let s = self.model.front_end(&x)?;
        for (m, range) in ranges {
            let chunk = self.model.encode_chunk(&s, range, m)?;
            self.scorer.add_chunk(&chunk)?;
            self.search.advance_chunk(&self.scorer)?;
        }
        Ok(())
    }

    fn commit(&mut self, all: bool) -> Vec<Emission> {
        let best = &self.search.beam()[0];
        let ready = if all { &best.prefix[..] } else { self.search.stable_prefix() };
        let chunk_index = self.search.chunks_done().saturating_sub(1);
        let now = self.clock.now_ms();
        let out: Vec<Emission> = ready[self.committed.min(ready.len())..]
            .iter()
            .map(|&symbol| Emission {
                chunk_index,
                symbol,
                cumulative_log_prob: best.log_prob,
                wall_clock_ms: now,
                raw_frames_seen: self.buffer.raw_len(),
            })
            .collect();
        self.committed = self.committed.max(ready.len());
        out
    }
}
