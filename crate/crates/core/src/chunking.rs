//! Chunk geometry, left-context masks, streaming frame buffering and latency.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Mask;

/// Fixed-length chunking of an encoded sequence: `W` frames per chunk,
/// `B` frames shared with the previous chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub chunk_len: usize,
    pub overlap: usize,
}

impl ChunkGeometry {
    pub fn new(chunk_len: usize, overlap: usize) -> Result<Self> {
        if chunk_len == 0 || overlap >= chunk_len {
            return Err(Error::Geometry { chunk_len, overlap });
        }
        Ok(ChunkGeometry { chunk_len, overlap })
    }

    /// Distance between consecutive chunk starts, `W - B`.
    pub fn stride(&self) -> usize {
        self.chunk_len - self.overlap
    }

    /// `M = ⌈(L-W)/(W-B) + 1⌉` for `L > W`, otherwise 1.
    pub fn num_chunks(&self, encoded_len: usize) -> usize {
        if encoded_len <= self.chunk_len {
            1
        } else {
            1 + (encoded_len - self.chunk_len).div_ceil(self.stride())
        }
    }

    /// Span of chunk `m` (0-based) in a sequence of `encoded_len` frames.
    pub fn chunk_range(&self, m: usize, encoded_len: usize) -> Range<usize> {
        let start = m * self.stride();
        start..(start + self.chunk_len).min(encoded_len)
    }

    pub fn ranges(&self, encoded_len: usize) -> Vec<Range<usize>> {
        (0..self.num_chunks(encoded_len)).map(|m| self.chunk_range(m, encoded_len)).collect()
    }
}

pub fn num_chunks(encoded_len: usize, chunk_len: usize, overlap: usize) -> Result<usize> {
    Ok(ChunkGeometry::new(chunk_len, overlap)?.num_chunks(encoded_len))
}

/// The `M` overlapping chunks of an encoded sequence. The last chunk is
/// truncated at `L` rather than padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkSet {
    pub geometry: ChunkGeometry,
    pub encoded_len: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// View of chunk `m` within `seq`.
    pub fn chunk<'s, T>(&self, seq: &'s [T], m: usize) -> &'s [T] {
        &seq[self.ranges[m].clone()]
    }
}

pub fn split_chunks(encoded_len: usize, chunk_len: usize, overlap: usize) -> Result<ChunkSet> {
    if encoded_len == 0 {
        return Err(Error::EmptyInput("cannot chunk an empty sequence".into()));
    }
    let geometry = ChunkGeometry::new(chunk_len, overlap)?;
    Ok(ChunkSet { geometry, encoded_len, ranges: geometry.ranges(encoded_len) })
}

/// Position `i` may attend to `j` iff `i - left ≤ j ≤ i`.
pub fn left_context_mask(len: usize, left: usize) -> Mask {
    Mask::from_fn(len, len, |i, j| j <= i && j + left >= i)
}

/// Stack of strided time convolutions in front of the encoder, used to map
/// raw frame counts to encoded frame counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrontEndGeometry {
    /// `(kernel, stride)` per layer, bottom first.
    pub layers: Vec<(usize, usize)>,
}

impl FrontEndGeometry {
    /// Two kernel-3 stride-2 layers: 4× down-sampling.
    pub fn standard() -> Self {
        FrontEndGeometry { layers: vec![(3, 2), (3, 2)] }
    }

    pub fn downsample(&self) -> usize {
        self.layers.iter().map(|&(_, s)| s).product()
    }

    /// Output length after every layer: `⌈T/s⌉` per layer.
    pub fn encoded_len(&self, raw_len: usize) -> usize {
        self.layers.iter().fold(raw_len, |t, &(_, s)| t.div_ceil(s))
    }

    /// Largest raw frame index that influences encoded frame `i`.
    pub fn last_raw_needed(&self, i: usize) -> usize {
        self.layers.iter().rev().fold(i, |idx, &(k, s)| idx * s + (k - 1) - (k - 1) / 2)
    }

    /// Encoded frames whose full receptive field lies within `raw_len` frames.
    pub fn ready_len(&self, raw_len: usize) -> usize {
        let total = self.encoded_len(raw_len);
        // last_raw_needed is increasing, so count the prefix that fits.
        let mut n = 0;
        while n < total && self.last_raw_needed(n) < raw_len {
            n += 1;
        }
        n
    }
}

/// Accumulates raw frames and releases chunk ranges as soon as every raw
/// frame they depend on has arrived.
#[derive(Clone, Debug)]
pub struct StreamBuffer {
    geometry: ChunkGeometry,
    front_end: FrontEndGeometry,
    dim: usize,
    frames: Vec<f64>,
    released: usize,
    finished: bool,
}

impl StreamBuffer {
    pub fn new(geometry: ChunkGeometry, front_end: FrontEndGeometry, dim: usize) -> Self {
        StreamBuffer { geometry, front_end, dim, frames: Vec::new(), released: 0, finished: false }
    }

    pub fn geometry(&self) -> ChunkGeometry {
        self.geometry
    }

    pub fn front_end(&self) -> &FrontEndGeometry {
        &self.front_end
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw_len(&self) -> usize {
        self.frames.len() / self.dim.max(1)
    }

    /// All raw frames received so far, row-major `[raw_len, dim]`.
    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Number of chunk ranges handed out so far.
    pub fn released(&self) -> usize {
        self.released
    }

    /// Appends row-major frames and returns the chunk ranges that became
    /// complete, in order.
    pub fn push_frames(&mut self, frames: &[f64]) -> Result<Vec<(usize, Range<usize>)>> {
        if self.finished {
            return Err(Error::Protocol("push after end of stream".into()));
        }
        if self.dim == 0 || !frames.len().is_multiple_of(self.dim) {
            return Err(Error::Shape(format!(
                "pushed {} values, not a multiple of frame width {}",
                frames.len(),
                self.dim
            )));
        }
        self.frames.extend_from_slice(frames);
        let ready = self.front_end.ready_len(self.raw_len());
        let mut out = Vec::new();
        loop {
            let r = self.geometry.chunk_range(self.released, usize::MAX);
            if r.end > ready {
                break;
            }
            out.push((self.released, r));
            self.released += 1;
        }
        Ok(out)
    }

    /// Ends the stream and returns the remaining chunk ranges, including the
    /// truncated final chunk.
    pub fn flush(&mut self) -> Result<Vec<(usize, Range<usize>)>> {
        if self.finished {
            return Err(Error::Protocol("flush called twice".into()));
        }
        self.finished = true;
        if self.raw_len() < self.front_end.downsample() {
            return Err(Error::EmptyInput(format!("stream ended after {} frames", self.raw_len())));
        }
        let len = self.front_end.encoded_len(self.raw_len());
        let total = self.geometry.num_chunks(len);
        let out = (self.released..total).map(|m| (m, self.geometry.chunk_range(m, len))).collect();
        self.released = total;
        Ok(out)
    }
}

/// Audio covered by one chunk and the effective latency once the overlap
/// already seen by the previous chunk is discounted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkLatency {
    pub chunk_ms: f64,
    pub effective_ms: f64,
}

pub fn chunk_latency_ms(chunk_len: usize, downsample: usize, frame_shift_ms: f64) -> f64 {
    chunk_len as f64 * downsample as f64 * frame_shift_ms
}

pub fn latency(geometry: ChunkGeometry, downsample: usize, frame_shift_ms: f64) -> ChunkLatency {
    ChunkLatency {
        chunk_ms: chunk_latency_ms(geometry.chunk_len, downsample, frame_shift_ms),
        effective_ms: chunk_latency_ms(geometry.stride(), downsample, frame_shift_ms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_count_examples() {
        assert_eq!(num_chunks(10, 10, 3).unwrap(), 1);
        assert_eq!(num_chunks(100, 10, 2).unwrap(), 13);
        assert_eq!(num_chunks(100, 10, 3).unwrap(), 14);
        assert_eq!(num_chunks(3, 10, 3).unwrap(), 1);
    }

    #[test]
    fn bad_geometry() {
        assert!(matches!(num_chunks(10, 0, 0), Err(Error::Geometry { .. })));
        assert!(matches!(num_chunks(10, 4, 4), Err(Error::Geometry { .. })));
        assert!(matches!(split_chunks(10, 4, 5), Err(Error::Geometry { .. })));
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_chunks(10, 10, 3).unwrap().ranges, vec![0..10]);
        assert_eq!(split_chunks(18, 10, 2).unwrap().ranges, vec![0..10, 8..18]);
        assert_eq!(split_chunks(17, 10, 2).unwrap().ranges, vec![0..10, 8..17]);
        assert!(matches!(split_chunks(0, 10, 2), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn chunk_views() {
        let seq: Vec<usize> = (0..17).collect();
        let set = split_chunks(17, 10, 2).unwrap();
        assert_eq!(set.chunk(&seq, 1), &seq[8..17]);
    }

    #[test]
    fn mask_examples() {
        let m = left_context_mask(3, 0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(i, j), i == j);
            }
        }
        let m = left_context_mask(3, 10);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
        let m = left_context_mask(5, 2);
        let row4: Vec<usize> = (0..5).filter(|&j| m.allowed(4, j)).collect();
        assert_eq!(row4, vec![2, 3, 4]);
    }

    #[test]
    fn front_end_arithmetic() {
        let fe = FrontEndGeometry::standard();
        assert_eq!(fe.downsample(), 4);
        assert_eq!(fe.encoded_len(16), 4);
        assert_eq!(fe.encoded_len(17), 5);
        assert_eq!(fe.encoded_len(8), 2);
        assert_eq!(fe.last_raw_needed(0), 3);
        assert_eq!(fe.last_raw_needed(2), 11);
        assert_eq!(fe.ready_len(3), 0);
        assert_eq!(fe.ready_len(4), 1);
        assert_eq!(fe.ready_len(11), 2);
        assert_eq!(fe.ready_len(12), 3);
    }

    #[test]
    fn latency_values() {
        assert_eq!(chunk_latency_ms(10, 4, 10.0), 400.0);
        assert_eq!(chunk_latency_ms(1, 4, 10.0), 40.0);
        let l = latency(ChunkGeometry::new(10, 2).unwrap(), 4, 10.0);
        assert_eq!(l.effective_ms, 320.0);
    }

    #[test]
    fn stream_rejects_push_after_flush() {
        let mut b = StreamBuffer::new(ChunkGeometry::new(4, 1).unwrap(), FrontEndGeometry::standard(), 2);
        b.push_frames(&[0.0; 8]).unwrap();
        b.flush().unwrap();
        assert!(matches!(b.push_frames(&[0.0; 2]), Err(Error::Protocol(_))));
    }

    #[test]
    fn short_stream_yields_one_truncated_chunk_on_flush() {
        let mut b = StreamBuffer::new(ChunkGeometry::new(4, 1).unwrap(), FrontEndGeometry::standard(), 1);
        assert!(b.push_frames(&[]).unwrap().is_empty());
        assert!(b.push_frames(&[1.0, 2.0, 3.0, 4.0]).unwrap().is_empty());
        assert_eq!(b.flush().unwrap(), vec![(0, 0..1)]);
    }

    #[test]
    fn too_short_stream_flush_is_an_error() {
        let mut b = StreamBuffer::new(ChunkGeometry::new(4, 1).unwrap(), FrontEndGeometry::standard(), 1);
        b.push_frames(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(b.flush(), Err(Error::EmptyInput(_))));
    }
}
