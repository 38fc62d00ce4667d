//! Sequences of frames and the segment index over them.

use std::collections::BTreeMap;

use crate::diffcore::Array;
use crate::error::{Error, Result};

/// Start frames of T-frame windows taken every `stride` frames; a trailing
/// remainder shorter than T is dropped.
pub fn segment_starts(n_frames: usize, seg_len: usize, stride: usize) -> Vec<usize> {
    assert!(seg_len >= 1 && stride >= 1, "segment length and stride must be positive");
    if n_frames < seg_len {
        return Vec::new();
    }
    (0..=(n_frames - seg_len) / stride).map(|k| k * stride).collect()
}

/// One utterance: its frames and the windows cut from them.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    /// `[n_frames, F]`
    pub frames: Array,
    pub label: Option<String>,
}

impl SequenceRecord {
    pub fn new(id: impl Into<String>, frames: Array, label: Option<String>) -> Result<Self> {
        let id = id.into();
        if frames.rank() != 2 {
            return Err(Error::Shape(format!("sequence `{id}`: frames must be a matrix, got {:?}", frames.shape())));
        }
        if !frames.all_finite() {
            return Err(Error::Format { path: id.clone().into(), msg: "non-finite frame value".into() });
        }
        Ok(SequenceRecord { id, frames, label })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.cols()
    }

    /// Non-overlapping T-frame windows.
    pub fn partition(&self, seg_len: usize) -> Vec<Array> {
        segment_starts(self.n_frames(), seg_len, seg_len).into_iter().map(|s| self.window(s, seg_len)).collect()
    }

    /// Frames `start..start + seg_len` as a `[T, F]` matrix.
    pub fn window(&self, start: usize, seg_len: usize) -> Array {
        let f = self.frame_dim();
        Array::matrix(seg_len, f, self.frames.data()[start * f..(start + seg_len) * f].to_vec())
    }
}

/// Reference to one training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentRef {
    pub seq: usize,
    pub start: usize,
}

/// Sequences sharing a frame dimension, windowed for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    seqs: Vec<SequenceRecord>,
    seg_len: usize,
    stride: usize,
    segments: Vec<SegmentRef>,
    n_partition: Vec<usize>,
    by_id: BTreeMap<String, usize>,
}

impl Dataset {
    /// Sequences shorter than one segment are kept but contribute no windows.
    pub fn new(seqs: Vec<SequenceRecord>, seg_len: usize, stride: usize) -> Result<Self> {
        if seg_len == 0 || stride == 0 {
            return Err(Error::Config("segment length and stride must be positive".into()));
        }
        let mut by_id = BTreeMap::new();
        let mut segments = Vec::new();
        let mut n_partition = Vec::with_capacity(seqs.len());
        let dim = seqs.first().map(|s| s.frame_dim());
        for (i, s) in seqs.iter().enumerate() {
            if Some(s.frame_dim()) != dim {
                return Err(Error::Shape(format!(
                    "sequence `{}` has frame dim {}, expected {}",
                    s.id,
                    s.frame_dim(),
                    dim.unwrap_or(0)
                )));
            }
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate sequence id `{}`", s.id)));
            }
            segments.extend(
                segment_starts(s.n_frames(), seg_len, stride).into_iter().map(|start| SegmentRef { seq: i, start }),
            );
            n_partition.push(s.n_frames() / seg_len);
        }
        Ok(Dataset { seqs, seg_len, stride, segments, n_partition, by_id })
    }

    pub fn sequences(&self) -> &[SequenceRecord] {
        &self.seqs
    }

    pub fn sequences_mut(&mut self) -> &mut [SequenceRecord] {
        &mut self.seqs
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.seqs.iter().map(|s| s.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.by_id.get(id).copied().ok_or_else(|| Error::UnknownSequence(id.to_string()))
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn frame_dim(&self) -> usize {
        self.seqs.first().map_or(0, |s| s.frame_dim())
    }

    pub fn segments(&self) -> &[SegmentRef] {
        &self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Segment count N_i of a sequence under non-overlapping windowing.
    pub fn n_segments_of(&self, seq: usize) -> usize {
        self.n_partition[seq]
    }

    pub fn window(&self, r: SegmentRef) -> Array {
        self.seqs[r.seq].window(r.start, self.seg_len)
    }

    /// Frame `t` of every referenced window, one `[B, F]` matrix per `t`.
    pub fn time_major(&self, refs: &[SegmentRef]) -> Vec<Array> {
        let f = self.frame_dim();
        (0..self.seg_len)
            .map(|t| {
                let mut data = Vec::with_capacity(refs.len() * f);
                for r in refs {
                    data.extend_from_slice(self.seqs[r.seq].frames.row(r.start + t));
                }
                Array::matrix(refs.len(), f, data)
            })
            .collect()
    }
}

/// Stacks `[T, F]` segments into `T` time-major `[B, F]` matrices.
pub fn stack_time_major(segs: &[&Array]) -> Vec<Array> {
    assert!(!segs.is_empty(), "empty segment list");
    let (t_len, f) = (segs[0].rows(), segs[0].cols());
    (0..t_len)
        .map(|t| {
            let mut data = Vec::with_capacity(segs.len() * f);
            for s in segs {
                assert_eq!(s.shape(), &[t_len, f], "segments differ in shape");
                data.extend_from_slice(s.row(t));
            }
            Array::matrix(segs.len(), f, data)
        })
        .collect()
}

/// Per-dimension mean and variance of training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Variances below this are treated as this value.
pub const VAR_FLOOR: f64 = 1e-10;

impl NormStats {
    /// Statistics over every frame of every sequence.
    pub fn fit(seqs: &[SequenceRecord]) -> Result<Self> {
        let dim = seqs.first().map(|s| s.frame_dim()).ok_or_else(|| Error::Empty("no sequences".into()))?;
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for s in seqs {
            if s.frame_dim() != dim {
                return Err(Error::Shape(format!("sequence `{}` has frame dim {}", s.id, s.frame_dim())));
            }
            for t in 0..s.n_frames() {
                n += 1;
                for (d, &x) in s.frames.row(t).iter().enumerate() {
                    let delta = x - mean[d];
                    mean[d] += delta / n as f64;
                    m2[d] += delta * (x - mean[d]);
                }
            }
        }
        if n == 0 {
            return Err(Error::Empty("no frames to normalize".into()));
        }
        let var = m2.into_iter().map(|v| v / n as f64).collect();
        Ok(NormStats { mean, var })
    }

    pub fn apply(&self, frames: &mut Array) {
        let dim = self.mean.len();
        assert_eq!(frames.cols(), dim, "normalization dim mismatch");
        for (k, v) in frames.data_mut().iter_mut().enumerate() {
            let d = k % dim;
            *v = (*v - self.mean[d]) / self.var[d].max(VAR_FLOOR).sqrt();
        }
    }

    pub fn invert(&self, frames: &mut Array) {
        let dim = self.mean.len();
        assert_eq!(frames.cols(), dim, "normalization dim mismatch");
        for (k, v) in frames.data_mut().iter_mut().enumerate() {
            let d = k % dim;
            *v = *v * self.var[d].max(VAR_FLOOR).sqrt() + self.mean[d];
        }
    }
}
