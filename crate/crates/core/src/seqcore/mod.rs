//! Core domain types shared by every other module: frame sequences, firing
//! weights, segmentations, file formats and the gradient checker.

mod gradcheck;
mod io;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_piecewise, numeric_gradient, GradCheckReport};
pub use io::{
    decode_frames, encode_frames, load_frames, load_segmentation, save_frames, save_segmentation,
    FRAMES_MAGIC,
};

/// A `T x D` matrix of features together with the time span of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    data: Array2<f64>,
    frame_period_ms: f64,
}

impl FrameSequence {
    pub fn new(data: Array2<f64>, frame_period_ms: f64) -> Result<Self> {
        let (t, d) = data.dim();
        if t == 0 || d == 0 {
            return Err(Error::EmptySequence);
        }
        if !(frame_period_ms.is_finite() && frame_period_ms > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frame period must be positive, got {frame_period_ms}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("frame {} dim {}", pos / d, pos % d)));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            frame_period_ms,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_period_ms: f64) -> Result<Self> {
        let t = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((t, d), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data, frame_period_ms)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    /// Always false for a constructed sequence; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.data.row(t)
    }

    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.frame_period_ms
    }

    pub fn frame_rate(&self) -> FrameRate {
        FrameRate::from_period_ms(self.frame_period_ms)
    }

    pub fn with_period(mut self, frame_period_ms: f64) -> Result<Self> {
        if !(frame_period_ms.is_finite() && frame_period_ms > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frame period must be positive, got {frame_period_ms}"
            )));
        }
        self.frame_period_ms = frame_period_ms;
        Ok(self)
    }
}

/// Frame period (ms) and the matching frame rate (Hz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRate {
    pub period_ms: f64,
    pub rate_hz: f64,
}

impl FrameRate {
    pub fn from_period_ms(period_ms: f64) -> Self {
        Self {
            period_ms,
            rate_hz: 1000.0 / period_ms,
        }
    }

    /// Bookkeeping after subsampling by a constant stride.
    pub fn subsampled(self, stride: usize) -> Self {
        Self::from_period_ms(self.period_ms * stride as f64)
    }
}

/// Per-frame nonnegative firing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSequence(Vec<f64>);

impl AlphaSequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (frame, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("alpha at frame {frame}")));
            }
            if value < 0.0 {
                return Err(Error::NegativeAlpha { frame, value });
            }
        }
        Ok(Self(values))
    }

    pub fn constant(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Segment end positions `t_1 < ... < t_K`.
///
/// Boundary `t_k` is 1-based: segment `k` covers the 0-based frames
/// `t_{k-1} .. t_k` (half-open, `t_0 = 0`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegmentationRepr", into = "SegmentationRepr")]
pub struct Segmentation {
    boundaries: Vec<usize>,
    labels: Option<Vec<i64>>,
    total_len: usize,
}

#[derive(Serialize, Deserialize)]
struct SegmentationRepr {
    total_len: usize,
    boundaries: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<i64>>,
}

impl TryFrom<SegmentationRepr> for Segmentation {
    type Error = Error;

    fn try_from(r: SegmentationRepr) -> Result<Self> {
        Segmentation::new(r.boundaries, r.labels, r.total_len)
    }
}

impl From<Segmentation> for SegmentationRepr {
    fn from(s: Segmentation) -> Self {
        SegmentationRepr {
            total_len: s.total_len,
            boundaries: s.boundaries,
            labels: s.labels,
        }
    }
}

impl Segmentation {
    pub fn new(boundaries: Vec<usize>, labels: Option<Vec<i64>>, total_len: usize) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::InvalidSegmentation("no boundaries".into()));
        }
        if boundaries[0] < 1 {
            return Err(Error::InvalidSegmentation("boundary 0 is not allowed".into()));
        }
        if let Some(w) = boundaries.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSegmentation(format!(
                "boundaries not strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        let last = *boundaries.last().unwrap();
        if last > total_len {
            return Err(Error::InvalidSegmentation(format!(
                "final boundary {last} exceeds total length {total_len}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != boundaries.len() {
                return Err(Error::InvalidSegmentation(format!(
                    "{} labels for {} segments",
                    l.len(),
                    boundaries.len()
                )));
            }
        }
        Ok(Self {
            boundaries,
            labels,
            total_len,
        })
    }

    /// Segmentation from per-segment lengths; the result always ends at `T`.
    pub fn from_lengths(lengths: &[usize], labels: Option<Vec<i64>>) -> Result<Self> {
        let mut end = 0;
        let boundaries = lengths
            .iter()
            .map(|&l| {
                end += l;
                end
            })
            .collect();
        Self::new(boundaries, labels, end)
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len()
    }

    /// Whether the final boundary sits at `T`.
    pub fn is_complete(&self) -> bool {
        self.boundaries.last() == Some(&self.total_len)
    }

    /// Half-open 0-based frame ranges of each segment.
    pub fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(0)
            .chain(self.boundaries.iter().copied())
            .zip(self.boundaries.iter().copied())
    }

    /// `K / (T * period / 1000)`.
    pub fn average_rate_hz(&self, frame_period_ms: f64) -> f64 {
        self.num_segments() as f64 / (self.total_len as f64 * frame_period_ms / 1000.0)
    }
}

/// Role of a weighted frame inside a segment; determines how the weight
/// depends on the firing sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRole {
    /// Leftover mass carried over from the previous boundary frame.
    Carry,
    /// The frame's whole firing weight.
    Whole,
    /// Closing portion of the frame at which the boundary fires.
    Closing,
    /// Constant weight not derived from firing weights (oracle pooling).
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedFrame {
    pub frame: usize,
    pub weight: f64,
    pub role: WeightRole,
}

/// Pooling weights per segment. Frame indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentWeights {
    pub segments: Vec<Vec<WeightedFrame>>,
    /// Accumulated mass after the last fired boundary.
    pub residual: f64,
    /// Whether the final segment is an emitted trailing segment, pooled with
    /// normalization by its weight sum.
    pub trailing: bool,
}

impl SegmentWeights {
    /// Uniform averaging over the frames of each segment.
    pub fn uniform(seg: &Segmentation) -> Self {
        let segments = seg
            .ranges()
            .map(|(s, e)| {
                let w = 1.0 / (e - s) as f64;
                (s..e)
                    .map(|frame| WeightedFrame {
                        frame,
                        weight: w,
                        role: WeightRole::Fixed,
                    })
                    .collect()
            })
            .collect();
        Self {
            segments,
            residual: 0.0,
            trailing: false,
        }
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Total weight assigned across all segments.
    pub fn assigned_mass(&self) -> f64 {
        self.segments.iter().flatten().map(|w| w.weight).sum()
    }
}
