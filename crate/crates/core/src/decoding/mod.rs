//! Chunk-synchronous inference: greedy and beam search with blank-triggered
//! chunk advance, streaming decode, and error-rate scoring.

mod cer;
mod stream;

pub use cer::{cer, edit_distance};
pub use stream::{Clock, Emission, ManualClock, StreamDecoder, SystemClock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChunkMemory, DecoderState, EncodedChunk, SyncTransformer, Vocabulary};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub width: usize,
    pub max_symbols_per_chunk: usize,
    /// Combine hypotheses with identical prefixes by log-sum-exp.
    pub merge_prefixes: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 5, max_symbols_per_chunk: 10, merge_prefixes: false }
    }
}

impl BeamConfig {
    pub fn greedy() -> Self {
        BeamConfig { width: 1, ..BeamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_symbols_per_chunk == 0 {
            return Err(Error::Config("beam width and per-chunk cap must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Source of next-symbol log-distributions for a decoding hypothesis.
pub trait ChunkScorer {
    type State: Clone;

    fn blank_id(&self) -> usize;

    fn initial_state(&self) -> Self::State;

    /// Log-distribution over all ids (blank included) for the symbol after
    /// `state`'s prefix, conditioned on chunk `chunk`.
    fn log_probs(&self, state: &mut Self::State, chunk: usize) -> Result<Vec<f64>>;

    fn extend(&self, state: &Self::State, symbol: usize) -> Self::State;
}

/// Scores hypotheses with a [`SyncTransformer`] against chunks as they are
/// encoded.
pub struct ModelScorer<'m> {
    model: &'m SyncTransformer,
    memories: Vec<ChunkMemory>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m SyncTransformer) -> Self {
        ModelScorer { model, memories: Vec::new() }
    }

    /// Registers the next chunk; chunks must arrive in order.
    pub fn add_chunk(&mut self, chunk: &EncodedChunk) -> Result<()> {
        if chunk.index != self.memories.len() {
            return Err(Error::Protocol(format!("chunk {} added after {} chunks", chunk.index, self.memories.len())));
        }
        self.memories.push(self.model.chunk_memory(chunk)?);
        Ok(())
    }

    pub fn num_chunks(&self) -> usize {
        self.memories.len()
    }

    /// Encodes all chunks of an utterance offline.
    pub fn for_utterance(model: &'m SyncTransformer, x: &Tensor) -> Result<Self> {
        let s = model.front_end(x)?;
        let mut scorer = ModelScorer::new(model);
        for (m, r) in model.geometry().ranges(s.rows()).into_iter().enumerate() {
            let chunk = model.encode_chunk(&s, r, m)?;
            scorer.add_chunk(&chunk)?;
        }
        Ok(scorer)
    }
}

impl ChunkScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn blank_id(&self) -> usize {
        Vocabulary::BLANK
    }

    fn initial_state(&self) -> DecoderState {
        DecoderState::new(Vocabulary::BLANK)
    }

    fn log_probs(&self, state: &mut DecoderState, chunk: usize) -> Result<Vec<f64>> {
        let memory = self.memories.get(chunk).ok_or(Error::Availability { chunk, available: self.memories.len() })?;
        self.model.decoder_step(state, memory)
    }

    fn extend(&self, state: &DecoderState, symbol: usize) -> DecoderState {
        let mut next = state.clone();
        next.push(symbol);
        next
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted non-blank symbols.
    pub prefix: Vec<usize>,
    /// Sum of the log-probabilities of every choice made, blanks included.
    pub log_prob: f64,
    /// Chunk currently being decoded (or, once finished, the last one).
    pub chunk_index: usize,
    pub emitted_in_chunk: usize,
    pub state: S,
}

/// Final decoding result for one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub symbols: Vec<usize>,
    pub log_prob: f64,
}

/// Greedy chunk-synchronous decoding over all `num_chunks` chunks.
pub fn greedy_decode<S: ChunkScorer>(scorer: &S, num_chunks: usize, max_symbols_per_chunk: usize) -> Result<Decoded> {
    BeamConfig { width: 1, max_symbols_per_chunk, merge_prefixes: false }.validate()?;
    let mut state = scorer.initial_state();
    let mut symbols = Vec::new();
    let mut log_prob = 0.0;
    for m in 0..num_chunks {
        let mut emitted = 0;
        while emitted < max_symbols_per_chunk {
            let lp = scorer.log_probs(&mut state, m)?;
            let best = argmax_blank_first(&lp, scorer.blank_id());
            log_prob += lp[best];
            if best == scorer.blank_id() {
                break;
            }
            symbols.push(best);
            state = scorer.extend(&state, best);
            emitted += 1;
        }
    }
    Ok(Decoded { symbols, log_prob })
}

/// Index of the largest entry; ties go to the blank, then to the lowest id.
fn argmax_blank_first(lp: &[f64], blank: usize) -> usize {
    let mut best = blank;
    for (i, &v) in lp.iter().enumerate() {
        if i != blank && v > lp[best] {
            best = i;
        }
    }
    best
}

/// Chunk-synchronous beam search.
///
/// Inside a chunk the beam expands in rounds. Each round, every active
/// hypothesis proposes a blank (finish the chunk) and every non-blank
/// symbol; a hypothesis reaching the per-chunk cap finishes without a blank
/// factor. Finished and active candidates compete together for `width`
/// slots, so width 1 reproduces greedy decoding. The chunk is done when no
/// active hypothesis survives; the finished ones form the beam for the next
/// chunk.
pub struct BeamSearch<St> {
    cfg: BeamConfig,
    beam: Vec<Hypothesis<St>>,
    chunks_done: usize,
    /// Expansion rounds executed (each evaluates the whole active beam).
    pub steps: usize,
}

impl<St: Clone> BeamSearch<St> {
    pub fn new(initial_state: St, cfg: BeamConfig) -> Result<Self> {
        cfg.validate()?;
        let root =
            Hypothesis { prefix: Vec::new(), log_prob: 0.0, chunk_index: 0, emitted_in_chunk: 0, state: initial_state };
        Ok(BeamSearch { cfg, beam: vec![root], chunks_done: 0, steps: 0 })
    }

    pub fn chunks_done(&self) -> usize {
        self.chunks_done
    }

    /// Hypotheses after the last completed chunk, best first.
    pub fn beam(&self) -> &[Hypothesis<St>] {
        &self.beam
    }

    /// Symbols shared by every hypothesis in the beam; no later pruning can
    /// change them.
    pub fn stable_prefix(&self) -> &[usize] {
        let first = &self.beam[0].prefix;
        let len = self.beam[1..]
            .iter()
            .fold(first.len(), |n, h| n.min(first.iter().zip(&h.prefix).take_while(|(a, b)| a == b).count()));
        &first[..len]
    }

    /// Decodes the next chunk for every hypothesis in the beam.
    pub fn advance_chunk<S: ChunkScorer<State = St>>(&mut self, scorer: &S) -> Result<()> {
        let m = self.chunks_done;
        let blank = scorer.blank_id();
        let cap = self.cfg.max_symbols_per_chunk;
        let mut active: Vec<Hypothesis<St>> = std::mem::take(&mut self.beam)
            .into_iter()
            .map(|mut h| {
                h.chunk_index = m;
                h.emitted_in_chunk = 0;
                h
            })
            .collect();
        let mut finished: Vec<Hypothesis<St>> = Vec::new();

        while !active.is_empty() {
            self.steps += 1;
            let mut pool: Vec<(bool, Hypothesis<St>)> = finished.drain(..).map(|h| (true, h)).collect();
            for mut h in active.drain(..) {
                let lp = scorer.log_probs(&mut h.state, m)?;
                for (sym, &score) in
                    std::iter::once((blank, &lp[blank])).chain(lp.iter().enumerate().filter(|&(i, _)| i != blank))
                {
                    if sym == blank {
                        let mut done = h.clone();
                        done.log_prob += score;
                        pool.push((true, done));
                    } else {
                        let mut prefix = h.prefix.clone();
                        prefix.push(sym);
                        let emitted = h.emitted_in_chunk + 1;
                        let next = Hypothesis {
                            prefix,
                            log_prob: h.log_prob + score,
                            chunk_index: m,
                            emitted_in_chunk: emitted,
                            state: scorer.extend(&h.state, sym),
                        };
                        // Cap reached: move on without a blank factor.
                        pool.push((emitted >= cap, next));
                    }
                }
            }
            if self.cfg.merge_prefixes {
                pool = merge(pool);
            }
            pool.sort_by(|a, b| b.1.log_prob.total_cmp(&a.1.log_prob));
            pool.truncate(self.cfg.width);
            for (done, h) in pool {
                if done {
                    finished.push(h);
                } else {
                    active.push(h);
                }
            }
        }
        finished.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        self.beam = finished;
        self.chunks_done += 1;
        Ok(())
    }

    /// Final n-best list, best first.
    pub fn finish(self) -> Vec<Decoded> {
        self.beam.into_iter().map(|h| Decoded { symbols: h.prefix, log_prob: h.log_prob }).collect()
    }
}

fn merge<T>(pool: Vec<(bool, Hypothesis<T>)>) -> Vec<(bool, Hypothesis<T>)> {
    let mut out: Vec<(bool, Hypothesis<T>)> = Vec::with_capacity(pool.len());
    for (done, h) in pool {
        match out.iter_mut().find(|(d, o)| {
            // Finished hypotheses forget their per-chunk count.
            *d == done && o.prefix == h.prefix && (done || o.emitted_in_chunk == h.emitted_in_chunk)
        }) {
            Some((_, o)) => o.log_prob = crate::lattice::log_add(o.log_prob, h.log_prob),
            None => out.push((done, h)),
        }
    }
    out
}

/// Beam decoding over all `num_chunks` chunks.
pub fn beam_decode<S: ChunkScorer>(scorer: &S, num_chunks: usize, cfg: &BeamConfig) -> Result<Vec<Decoded>> {
    let mut search = BeamSearch::new(scorer.initial_state(), cfg.clone())?;
    for _ in 0..num_chunks {
        search.advance_chunk(scorer)?;
    }
    Ok(search.finish())
}

/// Offline greedy decode of one utterance.
pub fn greedy_decode_features(model: &SyncTransformer, x: &Tensor, max_symbols_per_chunk: usize) -> Result<Decoded> {
    let scorer = ModelScorer::for_utterance(model, x)?;
    greedy_decode(&scorer, scorer.num_chunks(), max_symbols_per_chunk)
}

/// Offline beam decode of one utterance; returns the n-best list.
pub fn beam_decode_features(model: &SyncTransformer, x: &Tensor, cfg: &BeamConfig) -> Result<Vec<Decoded>> {
    let scorer = ModelScorer::for_utterance(model, x)?;
    beam_decode(&scorer, scorer.num_chunks(), cfg)
}
