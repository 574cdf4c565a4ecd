//! Continuous integrate-and-fire (CIF) subsampling.
//!
//! A small convolutional predictor emits a firing weight `alpha_t` in
//! `(0, 1)` per frame. Running sums of the weights fire a segment boundary
//! whenever they cross an integer; the frame at which a boundary fires is
//! split between the closing segment and the next one. Segments are pooled
//! by the weighted sum of their frames.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{
    AlphaSequence, FrameSequence, Segmentation, SegmentWeights, WeightRole, WeightedFrame,
};

pub const CIF_KERNEL: usize = 5;
pub const CIF_HIDDEN: usize = 512;
const CIF_PADDING: usize = CIF_KERNEL / 2;
pub const CIF_MAGIC: &[u8; 4] = b"CIF1";

/// Residual mass at or above which the unfired tail becomes a segment.
pub const TRAILING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative given the pre-activation `v` and the output `a`.
    fn derivative(self, v: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            _ => Err(Error::MalformedHeader(format!("unknown activation code {code}"))),
        }
    }
}

/// Same-padded convolution `D -> H` (kernel 5, stride 1), activation, and a
/// linear projection `H -> 1` followed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct CifParams {
    /// `H x D x kernel`.
    pub conv_weight: Array3<f64>,
    pub conv_bias: Array1<f64>,
    pub proj_weight: Array1<f64>,
    /// Single-element projection bias.
    pub proj_bias: Array1<f64>,
    pub activation: Activation,
}

impl CifParams {
    pub fn zeros(input_dim: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            conv_weight: Array3::zeros((hidden, input_dim, CIF_KERNEL)),
            conv_bias: Array1::zeros(hidden),
            proj_weight: Array1::zeros(hidden),
            proj_bias: Array1::zeros(1),
            activation,
        }
    }

    /// Random weights; the projection bias is set so that an all-zero input
    /// yields `alpha = initial_alpha`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        activation: Activation,
        initial_alpha: f64,
        rng: &mut R,
    ) -> Self {
        let conv = Normal::new(0.0, 1.0 / ((input_dim * CIF_KERNEL) as f64).sqrt()).unwrap();
        let proj = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
        let mut p = Self::zeros(input_dim, hidden, activation);
        p.conv_weight.mapv_inplace(|_| conv.sample(rng));
        p.proj_weight.mapv_inplace(|_| proj.sample(rng));
        let a = initial_alpha.clamp(1e-6, 1.0 - 1e-6);
        p.proj_bias[0] = (a / (1.0 - a)).ln();
        p
    }

    pub fn input_dim(&self) -> usize {
        self.conv_weight.dim().1
    }

    pub fn hidden(&self) -> usize {
        self.conv_weight.dim().0
    }

    fn validate(&self) -> Result<()> {
        let (h, _, k) = self.conv_weight.dim();
        if k != CIF_KERNEL || self.conv_bias.len() != h || self.proj_weight.len() != h || self.proj_bias.len() != 1 {
            return Err(Error::ShapeMismatch("inconsistent CIF parameter shapes".into()));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("CIF parameters".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.conv_weight.as_slice().expect("standard layout"),
            self.conv_bias.as_slice().expect("standard layout"),
            self.proj_weight.as_slice().expect("standard layout"),
            self.proj_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.conv_weight.as_slice_mut().expect("standard layout"),
            self.conv_bias.as_slice_mut().expect("standard layout"),
            self.proj_weight.as_slice_mut().expect("standard layout"),
            self.proj_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    /// `CIF1 | u32 D | u32 H | u32 kernel | u32 activation | f32 weights...`
    /// with weights in the order conv weight, conv bias, projection weight,
    /// projection bias.
    pub fn encode(&self) -> Vec<u8> {
        let (h, d, k) = self.conv_weight.dim();
        let mut buf = CIF_MAGIC.to_vec();
        for v in [d as u32, h as u32, k as u32, self.activation.code()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            for &v in t {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != CIF_MAGIC {
            return Err(Error::MalformedHeader("not a CIF1 file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (d, h, k) = (word(0), word(1), word(2));
        let activation = Activation::from_code(word(3) as u32)?;
        if k != CIF_KERNEL || d == 0 || h == 0 {
            return Err(Error::MalformedHeader(format!("bad shape D={d} H={h} k={k}")));
        }
        let mut p = Self::zeros(d, h, activation);
        let count: usize = p.tensors().iter().map(|t| t.len()).sum();
        let expected = 20 + 4 * count;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut values = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AlphaCache {
    unfolded: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    alpha: Vec<f64>,
}

/// `U[t, c*k + i] = x[t + i - 2, c]`, zero outside the sequence.
fn unfold(x: &Array2<f64>) -> Array2<f64> {
    let (t, d) = x.dim();
    let mut u = Array2::zeros((t, d * CIF_KERNEL));
    for row in 0..t {
        for i in 0..CIF_KERNEL {
            let src = row as isize + i as isize - CIF_PADDING as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            for c in 0..d {
                u[[row, c * CIF_KERNEL + i]] = x[[src as usize, c]];
            }
        }
    }
    u
}

fn fold_grad(du: &Array2<f64>, d: usize) -> Array2<f64> {
    let t = du.nrows();
    let mut dx = Array2::zeros((t, d));
    for row in 0..t {
        for i in 0..CIF_KERNEL {
            let src = row as isize + i as isize - CIF_PADDING as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            for c in 0..d {
                dx[[src as usize, c]] += du[[row, c * CIF_KERNEL + i]];
            }
        }
    }
    dx
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv_matrix(p: &CifParams) -> ndarray::ArrayView2<'_, f64> {
    let (h, d, k) = p.conv_weight.dim();
    p.conv_weight
        .view()
        .into_shape_with_order((h, d * k))
        .expect("standard layout")
}

pub fn predict_alpha_cached(x: &FrameSequence, p: &CifParams) -> Result<(AlphaSequence, AlphaCache)> {
    if x.dim() != p.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, CIF convolution expects {}",
            x.dim(),
            p.input_dim()
        )));
    }
    let unfolded = unfold(x.data());
    let mut pre = unfolded.dot(&conv_matrix(p).t());
    pre += &p.conv_bias;
    let act = pre.mapv(|v| p.activation.apply(v));
    let logits = act.dot(&p.proj_weight) + p.proj_bias[0];
    let alpha: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let seq = AlphaSequence::new(alpha.clone())?;
    Ok((
        seq,
        AlphaCache {
            unfolded,
            pre,
            act,
            alpha,
        },
    ))
}

/// `alpha_t = sigmoid(proj(act(conv(x)))_t)`, same length as `x`.
pub fn predict_alpha(x: &FrameSequence, p: &CifParams) -> Result<AlphaSequence> {
    predict_alpha_cached(x, p).map(|(a, _)| a)
}

/// Gradients of the firing weights with respect to input and parameters.
pub fn predict_alpha_backward(
    p: &CifParams,
    cache: &AlphaCache,
    grad_alpha: &[f64],
) -> (Array2<f64>, CifParams) {
    let (h, d, k) = p.conv_weight.dim();
    let dz = Array1::from_iter(
        grad_alpha
            .iter()
            .zip(&cache.alpha)
            .map(|(&g, &a)| g * a * (1.0 - a)),
    );
    let mut grad = CifParams::zeros(d, h, p.activation);
    grad.proj_bias[0] = dz.sum();
    grad.proj_weight = cache.act.t().dot(&dz);
    // d pre = (dz outer proj_weight) * act'(pre)
    let mut dpre = dz
        .view()
        .insert_axis(Axis(1))
        .dot(&p.proj_weight.view().insert_axis(Axis(0)));
    ndarray::Zip::from(&mut dpre)
        .and(&cache.pre)
        .and(&cache.act)
        .for_each(|g, &v, &a| *g *= p.activation.derivative(v, a));
    grad.conv_bias = dpre.sum_axis(Axis(0));
    grad.conv_weight = dpre
        .t()
        .dot(&cache.unfolded)
        .into_shape_with_order((h, d, k))
        .expect("contiguous product");
    let du = dpre.dot(&conv_matrix(p));
    (fold_grad(&du, d), grad)
}

/// Result of integrate-and-fire on one firing-weight sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FireTrace {
    /// 1-based boundary positions of every emitted segment.
    pub boundaries: Vec<usize>,
    pub weights: SegmentWeights,
    /// Running sums `sum_{i <= t} alpha_i`.
    pub cumulative: Vec<f64>,
    pub total_len: usize,
}

impl FireTrace {
    pub fn num_segments(&self) -> usize {
        self.boundaries.len()
    }

    /// Number of boundaries fired by integer crossings.
    pub fn num_fired(&self) -> usize {
        self.boundaries.len() - usize::from(self.weights.trailing)
    }

    pub fn segmentation(&self) -> Result<Segmentation> {
        if self.boundaries.is_empty() {
            return Err(Error::EmptySegmentation);
        }
        Segmentation::new(self.boundaries.clone(), None, self.total_len)
    }

    /// Identifies the smooth region of the pooling map: boundary positions,
    /// trailing emission and which carries are present.
    pub fn pattern(&self) -> (Vec<usize>, bool, Vec<usize>) {
        let carries = self
            .weights
            .segments
            .iter()
            .flatten()
            .filter(|w| w.role == WeightRole::Carry)
            .map(|w| w.frame)
            .collect();
        (self.boundaries.clone(), self.weights.trailing, carries)
    }
}

/// Integrate-and-fire over `alpha`.
///
/// The accumulator gains `alpha_t` each frame; when it reaches 1 a boundary
/// fires at `t`, the closing segment receives `alpha_t - (a - 1)` and the
/// excess `a - 1` opens the next segment at the same frame. A tail with
/// residual mass of at least [`TRAILING_THRESHOLD`] is emitted as a final
/// segment; otherwise its mass is reported as `residual` only.
pub fn integrate_and_fire(alpha: &AlphaSequence) -> Result<FireTrace> {
    let values = alpha.values();
    let t_len = values.len();
    let mut boundaries = Vec::new();
    let mut segments: Vec<Vec<WeightedFrame>> = Vec::new();
    let mut current: Vec<WeightedFrame> = Vec::new();
    let mut cumulative = Vec::with_capacity(t_len);
    let mut acc = 0.0;
    let mut running = 0.0;
    for (t, &a_t) in values.iter().enumerate() {
        if a_t < 0.0 {
            return Err(Error::NegativeAlpha { frame: t, value: a_t });
        }
        running += a_t;
        cumulative.push(running);
        acc += a_t;
        if acc >= 1.0 {
            let carry = acc - 1.0;
            if carry >= 1.0 {
                return Err(Error::MultipleFires(t));
            }
            current.push(WeightedFrame {
                frame: t,
                weight: a_t - carry,
                role: WeightRole::Closing,
            });
            segments.push(std::mem::take(&mut current));
            boundaries.push(t + 1);
            if carry > 0.0 {
                current.push(WeightedFrame {
                    frame: t,
                    weight: carry,
                    role: WeightRole::Carry,
                });
            }
            acc = carry;
        } else if a_t > 0.0 {
            current.push(WeightedFrame {
                frame: t,
                weight: a_t,
                role: WeightRole::Whole,
            });
        }
    }
    let trailing = acc >= TRAILING_THRESHOLD && !current.is_empty();
    if trailing {
        segments.push(current);
        boundaries.push(t_len);
    }
    Ok(FireTrace {
        boundaries,
        weights: SegmentWeights {
            segments,
            residual: acc,
            trailing,
        },
        cumulative,
        total_len: t_len,
    })
}

fn pool_rows(x: &Array2<f64>, weights: &SegmentWeights) -> Array2<f64> {
    let d = x.ncols();
    let k = weights.segments.len();
    let mut out = Array2::zeros((k, d));
    for (idx, seg) in weights.segments.iter().enumerate() {
        let mut row = out.row_mut(idx);
        for w in seg {
            row.scaled_add(w.weight, &x.row(w.frame));
        }
        if weights.trailing && idx + 1 == k {
            let total: f64 = seg.iter().map(|w| w.weight).sum();
            row /= total;
        }
    }
    out
}

/// Pools frames with precomputed segment weights. The output frame period is
/// the average segment duration `period * T / K`.
pub fn pool_with_weights(x: &FrameSequence, weights: &SegmentWeights) -> Result<FrameSequence> {
    let k = weights.segments.len();
    if k == 0 {
        return Err(Error::EmptySegmentation);
    }
    if let Some(w) = weights.segments.iter().flatten().find(|w| w.frame >= x.len()) {
        return Err(Error::ShapeMismatch(format!(
            "segment weight at frame {} for a sequence of {} frames",
            w.frame,
            x.len()
        )));
    }
    let out = pool_rows(x.data(), weights);
    FrameSequence::new(out, x.frame_period_ms() * x.len() as f64 / k as f64)
}

/// Weighted sum of the frames of each segment of `trace`.
pub fn segment_pool(x: &FrameSequence, trace: &FireTrace) -> Result<FrameSequence> {
    if x.len() != trace.total_len {
        return Err(Error::ShapeMismatch(format!(
            "trace over {} frames applied to {} frames",
            trace.total_len,
            x.len()
        )));
    }
    pool_with_weights(x, &trace.weights)
}

/// Pools teacher features with the trace computed from the student's firing
/// weights, using identical arithmetic.
pub fn shared_alpha_pool(teacher: &FrameSequence, student_trace: &FireTrace) -> Result<FrameSequence> {
    segment_pool(teacher, student_trace)
}

/// Backward pass of segment pooling. Returns gradients with respect to the
/// pooled frames and to the firing weights; boundary positions are held
/// fixed. Weights with [`WeightRole::Fixed`] contribute no firing gradient.
pub fn pool_backward(
    x: &Array2<f64>,
    weights: &SegmentWeights,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Vec<f64>) {
    let (t_len, _) = x.dim();
    let k = weights.segments.len();
    let mut dx = Array2::zeros(x.dim());
    let mut direct = vec![0.0; t_len];
    // prefix[m] is added to every alpha_j with j <= m
    let mut prefix = vec![0.0; t_len];
    for (idx, seg) in weights.segments.iter().enumerate() {
        let g = grad_out.row(idx);
        let normalized = weights.trailing && idx + 1 == k;
        let (scale, pooled) = if normalized {
            let total: f64 = seg.iter().map(|w| w.weight).sum();
            let mut y = ndarray::Array1::zeros(x.ncols());
            for w in seg {
                y.scaled_add(w.weight / total, &x.row(w.frame));
            }
            (1.0 / total, Some(y))
        } else {
            (1.0, None)
        };
        for w in seg {
            let xf = x.row(w.frame);
            dx.row_mut(w.frame).scaled_add(w.weight * scale, &g);
            let sensitivity = match &pooled {
                Some(y) => g.dot(&(&xf - y)) * scale,
                None => g.dot(&xf),
            };
            match w.role {
                WeightRole::Whole => direct[w.frame] += sensitivity,
                WeightRole::Carry => prefix[w.frame] += sensitivity,
                WeightRole::Closing => {
                    if w.frame > 0 {
                        prefix[w.frame - 1] -= sensitivity;
                    }
                }
                WeightRole::Fixed => {}
            }
        }
    }
    let mut dalpha = direct;
    let mut running = 0.0;
    for j in (0..t_len).rev() {
        running += prefix[j];
        dalpha[j] += running;
    }
    (dx, dalpha)
}

/// Maps pooled segment vectors back to frame rate: each frame takes the
/// vector of the segment whose span contains it; frames after the last
/// boundary take the last segment.
pub fn segment_upsample(y: &FrameSequence, boundaries: &[usize], total_len: usize) -> Result<FrameSequence> {
    if boundaries.len() != y.len() || boundaries.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} pooled frames for {} boundaries",
            y.len(),
            boundaries.len()
        )));
    }
    let index = segment_index(boundaries, total_len);
    let out = y.data().select(Axis(0), &index);
    FrameSequence::new(out, y.frame_period_ms() * y.len() as f64 / total_len as f64)
}

pub fn segment_upsample_backward(grad_out: &Array2<f64>, boundaries: &[usize]) -> Array2<f64> {
    let index = segment_index(boundaries, grad_out.nrows());
    let mut dy = Array2::zeros((boundaries.len(), grad_out.ncols()));
    for (t, g) in grad_out.outer_iter().enumerate() {
        dy.row_mut(index[t]).scaled_add(1.0, &g);
    }
    dy
}

fn segment_index(boundaries: &[usize], total_len: usize) -> Vec<usize> {
    let mut k = 0;
    (0..total_len)
        .map(|t| {
            while k + 1 < boundaries.len() && t >= boundaries[k] {
                k += 1;
            }
            k
        })
        .collect()
}
