//! The chunk-synchronous transformer transducer.
//!
//! A two-layer strided convolution front end feeds a pre-norm transformer
//! encoder whose self-attention sees only `left_context` positions to the
//! left and nothing to the right. The decoder is a pre-norm transformer
//! decoder over the emitted prefix whose cross-attention sees a single
//! encoded chunk, and predicts the next symbol or a blank (move to the next
//! chunk).

mod config;
mod params;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, Vocabulary, BLANK_SYMBOL, UNK_SYMBOL};
pub use params::{ParamId, ParamStore};

use crate::chunking::{left_context_mask, ChunkGeometry, ChunkSet, FrontEndGeometry};
use crate::error::{Error, Result};
use crate::lattice::LatticeProbs;
use crate::tensor::{Graph, Mask, Tensor, Var};

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;

/// Sinusoidal position table for positions `start..start+len`.
pub fn positional_encoding(start: usize, len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in start..start + len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, d, data).expect("positional table shape")
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.uniform(rng, &format!("{name}.weight"), vec![d_in, d_out], d_in),
            b: store.uniform(rng, &format!("{name}.bias"), vec![d_out], d_in),
        }
    }

    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.filled(&format!("{name}.gain"), vec![d], 1.0),
            bias: store.filled(&format!("{name}.bias"), vec![d], 0.0),
        }
    }

    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(store, rng, &format!("{name}.query"), d, d),
            k: Linear::new(store, rng, &format!("{name}.key"), d, d),
            v: Linear::new(store, rng, &format!("{name}.value"), d, d),
            o: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    fn keys_values(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Var)> {
        Ok((self.k.apply(g, p, x)?, self.v.apply(g, p, x)?))
    }

    fn attend(&self, g: &mut Graph, p: &[Var], x: Var, keys: Var, values: Var, mask: &Mask) -> Result<Var> {
        let q = self.q.apply(g, p, x)?;
        let d = g.value(q).cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, keys, values)
            } else {
                (g.slice_cols(q, h * dh, dh)?, g.slice_cols(keys, h * dh, dh)?, g.slice_cols(values, h * dh, dh)?)
            };
            let scores = g.matmul_t(qh, false, kh, true)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.masked_softmax(scores, mask)?;
            ctx.push(g.matmul(weights, vh)?);
        }
        let ctx = if ctx.len() == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
        self.o.apply(g, p, ctx)
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, inner: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), d, 2 * inner),
            down: Linear::new(store, rng, &format!("{name}.down"), inner, d),
        }
    }

    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = self.up.apply(g, p, x)?;
        let h = g.glu(h)?;
        self.down.apply(g, p, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderBlock {
    norm_attn: Norm,
    attn: Attention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    conv1_kernel: ParamId,
    conv1_bias: ParamId,
    conv2_kernel: ParamId,
    conv2_bias: ParamId,
    encoder: Vec<EncoderBlock>,
    encoder_norm: Norm,
    embedding: ParamId,
    decoder: Vec<DecoderBlock>,
    decoder_norm: Norm,
    output: Linear,
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (d, k) = (cfg.d_model, CONV_KERNEL);
        let conv1_kernel = store.uniform(rng, "frontend.conv1.kernel", vec![k, cfg.d_in, d], k * cfg.d_in);
        let conv1_bias = store.uniform(rng, "frontend.conv1.bias", vec![d], k * cfg.d_in);
        let conv2_kernel = store.uniform(rng, "frontend.conv2.kernel", vec![k, d, d], k * d);
        let conv2_bias = store.uniform(rng, "frontend.conv2.bias", vec![d], k * d);
        let encoder = (0..cfg.n_enc_blocks)
            .map(|i| {
                let name = format!("encoder.{i}");
                EncoderBlock {
                    norm_attn: Norm::new(store, &format!("{name}.norm_attn"), d),
                    attn: Attention::new(store, rng, &format!("{name}.attn"), d, cfg.n_heads),
                    norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_inner),
                }
            })
            .collect();
        let encoder_norm = Norm::new(store, "encoder.norm", d);
        let embedding = store.uniform(rng, "decoder.embedding", vec![cfg.vocab_size, d], 1);
        let decoder = (0..cfg.n_dec_blocks)
            .map(|i| {
                let name = format!("decoder.{i}");
                DecoderBlock {
                    norm_self: Norm::new(store, &format!("{name}.norm_self"), d),
                    self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, cfg.n_heads),
                    norm_cross: Norm::new(store, &format!("{name}.norm_cross"), d),
                    cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, cfg.n_heads),
                    norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_inner),
                }
            })
            .collect();
        let decoder_norm = Norm::new(store, "decoder.norm", d);
        let output = Linear::new(store, rng, "decoder.output", d, cfg.vocab_size);
        Layout {
            conv1_kernel,
            conv1_bias,
            conv2_kernel,
            conv2_bias,
            encoder,
            encoder_norm,
            embedding,
            decoder,
            decoder_norm,
            output,
        }
    }
}

/// Encoder output for one chunk `C_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedChunk {
    pub index: usize,
    pub range: Range<usize>,
    /// `[range.len(), d_model]`
    pub states: Tensor,
}

/// Per-block cross-attention keys and values of one chunk, shared by all
/// hypotheses decoding against it.
#[derive(Clone, Debug)]
pub struct ChunkMemory {
    pub index: usize,
    kv: Vec<(Tensor, Tensor)>,
}

/// Decoder prefix `y_0..y_u` plus per-block self-attention keys/values for
/// the positions already evaluated against the current chunk.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub prefix: Vec<usize>,
    chunk: Option<usize>,
    cache: Vec<(Tensor, Tensor)>,
    last: Option<Vec<f64>>,
}

impl DecoderState {
    /// Prefix holding only the start symbol.
    pub fn new(start_id: usize) -> Self {
        DecoderState { prefix: vec![start_id], chunk: None, cache: Vec::new(), last: None }
    }

    pub fn push(&mut self, symbol: usize) {
        self.prefix.push(symbol);
        self.last = None;
    }

    fn cached_len(&self) -> usize {
        self.cache.first().map_or(0, |(k, _)| k.rows())
    }
}

/// Graph handles for one utterance's lattice.
#[derive(Clone, Copy, Debug)]
pub struct LatticeVars {
    pub blank: Var,
    pub label: Var,
    pub chunks: usize,
    pub labels: usize,
}

#[derive(Clone, Debug)]
pub struct SyncTransformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl SyncTransformer {
    /// Fresh model with seeded fan-in-scaled uniform initialisation.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &mut rng);
        Ok(SyncTransformer { config, params, layout })
    }

    /// Model with externally supplied parameters; names and shapes must match
    /// the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = SyncTransformer::new(config)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in fresh.params.names().iter().zip(fresh.params.tensors()).enumerate() {
            if &params.names()[i] != name || params.get(i).shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {i}: expected {name} {:?}, got {} {:?}",
                    t.shape(),
                    params.names()[i],
                    params.get(i).shape()
                )));
            }
        }
        Ok(SyncTransformer { params, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn geometry(&self) -> ChunkGeometry {
        self.config.geometry().expect("validated at construction")
    }

    pub fn front_end_geometry(&self) -> FrontEndGeometry {
        FrontEndGeometry { layers: vec![(CONV_KERNEL, CONV_STRIDE), (CONV_KERNEL, CONV_STRIDE)] }
    }

    fn check_features(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [t, _] if *t < self.front_end_geometry().downsample() => Err(Error::EmptyInput(format!(
                "{t} frames is shorter than the front end's {}x down-sampling",
                self.front_end_geometry().downsample()
            ))),
            [_, d] if *d == self.config.d_in => Ok(()),
            s => Err(Error::Shape(format!("features must be [T, {}], got {s:?}", self.config.d_in))),
        }
    }

    fn check_symbols(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(&id) => Err(Error::Vocab { id, size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    /// Convolutions, ReLU, then sinusoidal positions `0..L`.
    pub fn front_end_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let l = &self.layout;
        let h = g.conv1d_time(x, p[l.conv1_kernel], CONV_STRIDE)?;
        let h = g.add_row(h, p[l.conv1_bias])?;
        let h = g.relu(h)?;
        let h = g.conv1d_time(h, p[l.conv2_kernel], CONV_STRIDE)?;
        let h = g.add_row(h, p[l.conv2_bias])?;
        let h = g.relu(h)?;
        let len = g.value(h).rows();
        let pe = g.constant(positional_encoding(0, len, self.config.d_model));
        g.add(h, pe)
    }

    /// Encoder over consecutive positions; row `i` attends to rows
    /// `i-left_context ..= i` of the same input.
    pub fn encoder_graph(&self, g: &mut Graph, p: &[Var], s: Var) -> Result<Var> {
        let mask = left_context_mask(g.value(s).rows(), self.config.left_context);
        let mut x = s;
        for block in &self.layout.encoder {
            let h = block.norm_attn.apply(g, p, x)?;
            let (k, v) = block.attn.keys_values(g, p, h)?;
            let a = block.attn.attend(g, p, h, k, v, &mask)?;
            x = g.add(x, a)?;
            let h = block.norm_ffn.apply(g, p, x)?;
            let f = block.ffn.apply(g, p, h)?;
            x = g.add(x, f)?;
        }
        self.layout.encoder_norm.apply(g, p, x)
    }

    /// Cross-attention keys and values of a chunk for every decoder block.
    pub fn chunk_memory_graph(&self, g: &mut Graph, p: &[Var], chunk: Var) -> Result<Vec<(Var, Var)>> {
        self.layout.decoder.iter().map(|b| b.cross_attn.keys_values(g, p, chunk)).collect()
    }

    /// Runs the decoder on prefix positions `start..start+ids.len()`.
    ///
    /// `cache` holds per-block self-attention keys/values of positions
    /// `0..start` (empty when `start == 0`). Returns the log-distribution for
    /// every new row and the keys/values of positions `0..start+ids.len()`.
    #[allow(clippy::type_complexity)]
    pub fn decoder_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        ids: &[usize],
        start: usize,
        cache: &[(Var, Var)],
        memory: &[(Var, Var)],
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        self.check_symbols(ids)?;
        let n = ids.len();
        if n == 0 {
            return Err(Error::Contract("decoder needs at least one position".into()));
        }
        let d = self.config.d_model;
        let emb = g.select_rows(p[self.layout.embedding], ids)?;
        let pe = g.constant(positional_encoding(start, n, d));
        let mut x = g.add(emb, pe)?;
        let self_mask = Mask::from_fn(n, start + n, |i, j| j <= start + i);
        let mut kv_out = Vec::with_capacity(self.layout.decoder.len());
        for (bi, block) in self.layout.decoder.iter().enumerate() {
            let h = block.norm_self.apply(g, p, x)?;
            let (k_new, v_new) = block.self_attn.keys_values(g, p, h)?;
            let (k, v) = if start == 0 {
                (k_new, v_new)
            } else {
                let (ck, cv) = cache[bi];
                (g.concat_rows(&[ck, k_new])?, g.concat_rows(&[cv, v_new])?)
            };
            kv_out.push((k, v));
            let a = block.self_attn.attend(g, p, h, k, v, &self_mask)?;
            x = g.add(x, a)?;

            let h = block.norm_cross.apply(g, p, x)?;
            let (mk, mv) = memory[bi];
            let cross_mask = Mask::full(n, g.value(mk).rows());
            let c = block.cross_attn.attend(g, p, h, mk, mv, &cross_mask)?;
            x = g.add(x, c)?;

            let h = block.norm_ffn.apply(g, p, x)?;
            let f = block.ffn.apply(g, p, h)?;
            x = g.add(x, f)?;
        }
        let h = self.layout.decoder_norm.apply(g, p, x)?;
        let logits = self.layout.output.apply(g, p, h)?;
        Ok((g.log_softmax(logits)?, kv_out))
    }

    /// Builds the full teacher-forced lattice for one utterance: every chunk
    /// of the (offline) encoder output against every prefix `y_0..y_u`.
    pub fn lattice_graph(&self, g: &mut Graph, p: &[Var], x: &Tensor, labels: &[usize]) -> Result<LatticeVars> {
        self.check_features(x)?;
        self.check_symbols(labels)?;
        let blank = Vocabulary::BLANK;
        if labels.contains(&blank) {
            return Err(Error::Contract("target sequence contains the blank symbol".into()));
        }
        let xv = g.constant(x.clone());
        let s = self.front_end_graph(g, p, xv)?;
        let enc = self.encoder_graph(g, p, s)?;
        let len = g.value(enc).rows();
        let ranges = self.geometry().ranges(len);
        let mut ids = Vec::with_capacity(labels.len() + 1);
        ids.push(blank);
        ids.extend_from_slice(labels);

        let mut outputs = Vec::with_capacity(ranges.len());
        for r in &ranges {
            let chunk = g.slice_rows(enc, r.start, r.end)?;
            let memory = self.chunk_memory_graph(g, p, chunk)?;
            let (logp, _) = self.decoder_graph(g, p, &ids, 0, &[], &memory)?;
            outputs.push(logp);
        }
        let all = if outputs.len() == 1 { outputs[0] } else { g.concat_rows(&outputs)? };

        let (vocab, width) = (self.config.vocab_size, labels.len() + 1);
        let mut blank_idx = Vec::with_capacity(ranges.len() * width);
        let mut label_idx = Vec::with_capacity(ranges.len() * labels.len());
        for m in 0..ranges.len() {
            for u in 0..width {
                let row = m * width + u;
                blank_idx.push(row * vocab + blank);
                if u < labels.len() {
                    label_idx.push(row * vocab + labels[u]);
                }
            }
        }
        Ok(LatticeVars {
            blank: g.gather(all, &blank_idx)?,
            label: g.gather(all, &label_idx)?,
            chunks: ranges.len(),
            labels: labels.len(),
        })
    }

    /// Negative log-likelihood `-ln p(y|x)` as a graph scalar.
    pub fn loss_graph(&self, g: &mut Graph, p: &[Var], x: &Tensor, labels: &[usize]) -> Result<Var> {
        let lv = self.lattice_graph(g, p, x, labels)?;
        g.lattice_nll(lv.blank, lv.label, lv.chunks, lv.labels)
    }

    /// Teacher-forced lattice log-probabilities (no gradients).
    pub fn lattice_probs_for(&self, x: &Tensor, labels: &[usize]) -> Result<LatticeProbs> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let lv = self.lattice_graph(&mut g, &p, x, labels)?;
        LatticeProbs::new(lv.chunks, lv.labels, g.value(lv.blank).data().to_vec(), g.value(lv.label).data().to_vec())
    }

    /// Front end over all frames: `[L, d_model]` with `L = ⌈⌈T/2⌉/2⌉`.
    pub fn front_end(&self, x: &Tensor) -> Result<Tensor> {
        self.check_features(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = self.front_end_graph(&mut g, &p, xv)?;
        Ok(g.value(s).clone())
    }

    /// Full-sequence encoder output and its chunking.
    pub fn encode_offline(&self, x: &Tensor) -> Result<(Tensor, ChunkSet)> {
        self.check_features(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = self.front_end_graph(&mut g, &p, xv)?;
        let enc = self.encoder_graph(&mut g, &p, s)?;
        let out = g.value(enc).clone();
        let len = out.rows();
        let chunks = crate::chunking::split_chunks(len, self.config.chunk_len, self.config.overlap)?;
        Ok((out, chunks))
    }

    /// Encodes chunk `index` covering `range` from the front-end output `s`,
    /// which needs rows up to `range.end` only. The encoder is evaluated on
    /// the window that can influence the chunk, `n_enc_blocks·left_context`
    /// rows to its left.
    pub fn encode_chunk(&self, s: &Tensor, range: Range<usize>, index: usize) -> Result<EncodedChunk> {
        if s.rows() < range.end || range.is_empty() {
            return Err(Error::Availability { chunk: index, available: s.rows() });
        }
        let reach = self.config.n_enc_blocks * self.config.left_context;
        let window_start = range.start.saturating_sub(reach);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let sv = g.constant(s.row_range(window_start, range.end));
        let enc = self.encoder_graph(&mut g, &p, sv)?;
        let states = g.value(enc).row_range(range.start - window_start, range.end - window_start);
        Ok(EncodedChunk { index, range, states })
    }

    pub fn chunk_memory(&self, chunk: &EncodedChunk) -> Result<ChunkMemory> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(chunk.states.clone());
        let kv = self.chunk_memory_graph(&mut g, &p, c)?;
        let kv = kv.into_iter().map(|(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        Ok(ChunkMemory { index: chunk.index, kv })
    }

    /// Log-distribution over the vocabulary (blank included) for the symbol
    /// following `state.prefix`, conditioned on one chunk.
    pub fn decoder_step(&self, state: &mut DecoderState, memory: &ChunkMemory) -> Result<Vec<f64>> {
        if state.prefix.is_empty() {
            return Err(Error::Contract("decoder prefix must start with the start symbol".into()));
        }
        if state.chunk != Some(memory.index) {
            state.chunk = Some(memory.index);
            state.cache.clear();
            state.last = None;
        }
        if let Some(last) = &state.last {
            return Ok(last.clone());
        }
        let start = state.cached_len();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let cache: Vec<(Var, Var)> =
            state.cache.iter().map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone()))).collect();
        let mem: Vec<(Var, Var)> =
            memory.kv.iter().map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone()))).collect();
        let (logp, kv) = self.decoder_graph(&mut g, &p, &state.prefix[start..], start, &cache, &mem)?;
        state.cache = kv.into_iter().map(|(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        let out = g.value(logp);
        let last = out.row(out.rows() - 1).to_vec();
        state.last = Some(last.clone());
        Ok(last)
    }
}
