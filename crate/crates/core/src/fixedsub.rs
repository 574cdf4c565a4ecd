//! Fixed-stride subsampling and upsampling: average pooling, frame
//! concatenation, strided convolution (kernel = stride), frame repetition
//! and transposed convolution.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seqcore::FrameSequence;

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    Ok(())
}

/// Mean over windows of `stride` frames; a trailing partial window is
/// averaged over the frames it has. Output length `ceil(T / stride)`.
pub fn avg_pool(x: &FrameSequence, stride: usize) -> Result<FrameSequence> {
    check_stride(stride)?;
    let (t, d) = x.data().dim();
    let out_len = t.div_ceil(stride);
    let mut out = Array2::zeros((out_len, d));
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        let start = j * stride;
        let end = (start + stride).min(t);
        let window = x.data().slice(s![start..end, ..]);
        row.assign(&window.sum_axis(Axis(0)));
        row /= (end - start) as f64;
    }
    FrameSequence::new(out, x.frame_period_ms() * stride as f64)
}

/// Gradient of [`avg_pool`] with respect to its input of length `input_len`.
pub fn avg_pool_backward(grad_out: &Array2<f64>, input_len: usize, stride: usize) -> Array2<f64> {
    let d = grad_out.ncols();
    let mut dx = Array2::zeros((input_len, d));
    for t in 0..input_len {
        let j = t / stride;
        let start = j * stride;
        let n = ((start + stride).min(input_len) - start) as f64;
        dx.row_mut(t).scaled_add(1.0 / n, &grad_out.row(j));
    }
    dx
}

/// Concatenates each run of `stride` frames into one `D * stride` frame;
/// the `T mod stride` leftover frames are dropped.
pub fn concat_pool(x: &FrameSequence, stride: usize) -> Result<FrameSequence> {
    check_stride(stride)?;
    let (t, d) = x.data().dim();
    if t < stride {
        return Err(Error::InvalidArgument(format!(
            "sequence of {t} frames is shorter than stride {stride}"
        )));
    }
    let out_len = t / stride;
    let flat: Vec<f64> = x
        .data()
        .slice(s![..out_len * stride, ..])
        .iter()
        .copied()
        .collect();
    let out = Array2::from_shape_vec((out_len, d * stride), flat).expect("row-major reshape");
    FrameSequence::new(out, x.frame_period_ms() * stride as f64)
}

/// Repeats frame `j` of `y` over output frames `j*stride .. (j+1)*stride`,
/// truncating the final block to reach exactly `target_len` frames.
pub fn repeat_upsample(y: &FrameSequence, stride: usize, target_len: usize) -> Result<FrameSequence> {
    check_stride(stride)?;
    if target_len.div_ceil(stride) != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames cannot be repeated by {stride} to reach {target_len}",
            y.len()
        )));
    }
    let out = y.data().select(Axis(0), &(0..target_len).map(|t| t / stride).collect::<Vec<_>>());
    FrameSequence::new(out, y.frame_period_ms() / stride as f64)
}

pub fn repeat_backward(grad_out: &Array2<f64>, stride: usize, input_len: usize) -> Array2<f64> {
    let mut dy = Array2::zeros((input_len, grad_out.ncols()));
    for (t, g) in grad_out.outer_iter().enumerate() {
        dy.row_mut(t / stride).scaled_add(1.0, &g);
    }
    dy
}

fn random_tensor3<R: Rng + ?Sized>(shape: (usize, usize, usize), std: f64, rng: &mut R) -> Array3<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array3::from_shape_fn(shape, |_| normal.sample(rng))
}

/// Weights `C_out x C_in x k` of a subsampling convolution with `k = stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    stride: usize,
}

impl ConvParams {
    pub fn new(weight: Array3<f64>, bias: Array1<f64>, stride: usize) -> Result<Self> {
        check_stride(stride)?;
        let (c_out, _, k) = weight.dim();
        if k != stride {
            return Err(Error::ShapeMismatch(format!(
                "kernel {k} must equal stride {stride}"
            )));
        }
        if bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {c_out} output channels",
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("convolution parameters".into()));
        }
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            stride,
        })
    }

    pub fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            weight: Array3::zeros((c_out, c_in, stride)),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    /// Normal init with variance `1 / (C_in * k)`.
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let std = 1.0 / ((c_in * stride) as f64).sqrt();
        Self {
            weight: random_tensor3((c_out, c_in, stride), std, rng),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn conv_forward_raw(x: &Array2<f64>, p: &ConvParams) -> Result<Array2<f64>> {
    let (t, c_in) = x.dim();
    let (c_out, w_in, k) = p.weight.dim();
    if c_in != w_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels, convolution expects {w_in}"
        )));
    }
    if t < k {
        return Err(Error::ShapeMismatch(format!(
            "sequence of {t} frames is shorter than kernel {k}"
        )));
    }
    let out_len = t / p.stride;
    let mut out = Array2::zeros((out_len, c_out));
    for j in 0..out_len {
        for c in 0..c_out {
            let mut acc = p.bias[c];
            for i in 0..k {
                let frame = x.row(j * p.stride + i);
                for (cp, &xv) in frame.iter().enumerate() {
                    acc += p.weight[[c, cp, i]] * xv;
                }
            }
            out[[j, c]] = acc;
        }
    }
    Ok(out)
}

/// `out[j, c] = bias[c] + sum_{i < k, c'} w[c, c', i] * x[j*stride + i, c']`,
/// length `floor(T / stride)`.
pub fn strided_conv(x: &FrameSequence, p: &ConvParams) -> Result<FrameSequence> {
    let out = conv_forward_raw(x.data(), p)?;
    FrameSequence::new(out, x.frame_period_ms() * p.stride as f64)
}

/// Returns the input gradient and the parameter gradient (same layout as `p`).
pub fn strided_conv_backward(
    x: &Array2<f64>,
    p: &ConvParams,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, ConvParams) {
    let (c_out, c_in, k) = p.weight.dim();
    let mut dx = Array2::zeros(x.dim());
    let mut grad = ConvParams::zeros(c_in, c_out, p.stride);
    for (j, g) in grad_out.outer_iter().enumerate() {
        for c in 0..c_out {
            let gc = g[c];
            grad.bias[c] += gc;
            for i in 0..k {
                let t = j * p.stride + i;
                for cp in 0..c_in {
                    grad.weight[[c, cp, i]] += gc * x[[t, cp]];
                    dx[[t, cp]] += gc * p.weight[[c, cp, i]];
                }
            }
        }
    }
    (dx, grad)
}

/// Weights `C_in x C_out x k` of a transposed convolution with `k = stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvParams {
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    stride: usize,
}

impl DeconvParams {
    pub fn new(weight: Array3<f64>, bias: Array1<f64>, stride: usize) -> Result<Self> {
        check_stride(stride)?;
        let (_, c_out, k) = weight.dim();
        if k != stride {
            return Err(Error::ShapeMismatch(format!(
                "kernel {k} must equal stride {stride}"
            )));
        }
        if bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {c_out} output channels",
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("deconvolution parameters".into()));
        }
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            stride,
        })
    }

    pub fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            weight: Array3::zeros((c_in, c_out, stride)),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c_in as f64).sqrt();
        Self {
            weight: random_tensor3((c_in, c_out, stride), std, rng),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn deconv_forward_raw(y: &Array2<f64>, p: &DeconvParams, target_len: usize) -> Result<Array2<f64>> {
    let (len, c_in) = y.dim();
    let (w_in, c_out, k) = p.weight.dim();
    if c_in != w_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels, deconvolution expects {w_in}"
        )));
    }
    if target_len == 0 {
        return Err(Error::ShapeMismatch("target length must be positive".into()));
    }
    let mut out = Array2::zeros((target_len, c_out));
    for j in 0..len {
        for i in 0..k {
            let t = j * p.stride + i;
            if t >= target_len {
                break;
            }
            for c in 0..c_out {
                let mut acc = p.bias[c];
                for cp in 0..c_in {
                    acc += p.weight[[cp, c, i]] * y[[j, cp]];
                }
                out[[t, c]] = acc;
            }
        }
    }
    Ok(out)
}

/// Transposed convolution with stride = kernel; output frames beyond
/// `len * stride` are zero and frames beyond `target_len` are cut.
pub fn deconv_upsample(y: &FrameSequence, p: &DeconvParams, target_len: usize) -> Result<FrameSequence> {
    let out = deconv_forward_raw(y.data(), p, target_len)?;
    FrameSequence::new(out, y.frame_period_ms() / p.stride as f64)
}

pub fn deconv_backward(
    y: &Array2<f64>,
    p: &DeconvParams,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, DeconvParams) {
    let (len, c_in) = y.dim();
    let (_, c_out, k) = p.weight.dim();
    let target_len = grad_out.nrows();
    let mut dy = Array2::zeros(y.dim());
    let mut grad = DeconvParams::zeros(c_in, c_out, p.stride);
    for j in 0..len {
        for i in 0..k {
            let t = j * p.stride + i;
            if t >= target_len {
                break;
            }
            for c in 0..c_out {
                let g = grad_out[[t, c]];
                grad.bias[c] += g;
                for cp in 0..c_in {
                    grad.weight[[cp, c, i]] += g * y[[j, cp]];
                    dy[[j, cp]] += g * p.weight[[cp, c, i]];
                }
            }
        }
    }
    (dy, grad)
}
