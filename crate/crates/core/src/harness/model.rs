//! Toy teacher and configurable student with hand-written backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cif::{
    integrate_and_fire, pool_backward, pool_with_weights, predict_alpha_backward, predict_alpha_cached,
    Activation, AlphaCache, CifParams, FireTrace,
};
use crate::error::{Error, Result};
use crate::fixedsub::{
    avg_pool, avg_pool_backward, strided_conv, strided_conv_backward, ConvParams, DeconvParams,
};
use crate::guidance::{PredictionHead, Subsampling};
use crate::seqcore::{AlphaSequence, FrameSequence, SegmentWeights, Segmentation};

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// `tanh(x W^T + b)` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut pre = x.dot(&self.weight.t());
        pre += &self.bias;
        pre.mapv_inplace(f64::tanh);
        pre
    }

    /// Gradient with respect to the input; parameter gradients accumulate
    /// into `grad`. `y` is the forward output.
    fn backward(&self, x: &Array2<f64>, y: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        let dpre = dy * &y.mapv(|v| 1.0 - v * v);
        grad.weight += &dpre.t().dot(x);
        grad.bias += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.weight)
    }
}

/// Frozen stack of `tanh` layers `D -> D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTeacher {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub depth: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { depth: 4, seed: 0 }
    }
}

impl ToyTeacher {
    pub fn new(dim: usize, cfg: &TeacherConfig) -> Result<Self> {
        if dim == 0 || cfg.depth == 0 {
            return Err(Error::InvalidArgument("teacher needs positive width and depth".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            layers: (0..cfg.depth).map(|_| Dense::random(dim, dim, &mut rng)).collect(),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    /// Outputs of every layer, first layer first.
    pub fn forward(&self, x: &FrameSequence) -> Result<Vec<FrameSequence>> {
        if x.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "teacher expects {} channels, got {}",
                self.dim(),
                x.dim()
            )));
        }
        let mut h = x.data().clone();
        self.layers
            .iter()
            .map(|l| {
                h = l.forward(&h);
                FrameSequence::new(h.clone(), x.frame_period_ms())
            })
            .collect()
    }

    /// Outputs of the 1-based `layers`.
    pub fn targets(&self, x: &FrameSequence, layers: &[usize]) -> Result<Vec<FrameSequence>> {
        let all = self.forward(x)?;
        layers
            .iter()
            .map(|&l| {
                if l == 0 || l > all.len() {
                    return Err(Error::InvalidArgument(format!(
                        "teacher layer {l} out of 1..={}",
                        all.len()
                    )));
                }
                Ok(all[l - 1].clone())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubsamplerConfig {
    None,
    Avg {
        stride: usize,
    },
    Conv {
        stride: usize,
    },
    Cif {
        #[serde(default = "default_cif_hidden")]
        hidden: usize,
        #[serde(default)]
        activation: Activation,
        /// Firing weight produced for an all-zero input at initialization.
        #[serde(default = "default_initial_alpha")]
        initial_alpha: f64,
    },
    /// Uniform pooling within ground-truth segments.
    Oracle,
}

fn default_cif_hidden() -> usize {
    64
}

fn default_initial_alpha() -> f64 {
    0.3
}

impl SubsamplerConfig {
    pub fn cif() -> Self {
        SubsamplerConfig::Cif {
            hidden: default_cif_hidden(),
            activation: Activation::default(),
            initial_alpha: default_initial_alpha(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    /// Width of an optional per-frame convolutional front-end.
    pub frontend_dim: Option<usize>,
    pub subsampler: SubsamplerConfig,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    /// Appends one residual single-head self-attention layer.
    pub attention: bool,
    /// 1-based teacher layers predicted by the heads.
    pub heads: Vec<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            frontend_dim: None,
            subsampler: SubsamplerConfig::None,
            hidden_dim: 32,
            encoder_layers: 2,
            attention: false,
            heads: vec![2, 3, 4],
        }
    }
}

/// Residual single-head attention `x + softmax(x Wq (x Wk)^T / sqrt d) x Wv Wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    c: Array2<f64>,
}

impl Attention {
    fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            wq: normal_matrix(d, d, s, rng),
            wk: normal_matrix(d, d, s, rng),
            wv: normal_matrix(d, d, s, rng),
            wo: normal_matrix(d, d, s, rng),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let scale = 1.0 / (x.ncols() as f64).sqrt();
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let mut p = q.dot(&k.t()) * scale;
        for mut row in p.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|s| (s - m).exp());
            let z = row.sum();
            row /= z;
        }
        let c = p.dot(&v);
        let out = x + &c.dot(&self.wo);
        (out, AttentionCache { q, k, v, p, c })
    }

    fn backward(&self, x: &Array2<f64>, cache: &AttentionCache, g: &Array2<f64>, grad: &mut Attention) -> Array2<f64> {
        let scale = 1.0 / (x.ncols() as f64).sqrt();
        grad.wo += &cache.c.t().dot(g);
        let dc = g.dot(&self.wo.t());
        let dp = dc.dot(&cache.v.t());
        let dv = cache.p.t().dot(&dc);
        let mut ds = &cache.p * &dp;
        let row_dot = ds.sum_axis(Axis(1));
        for (mut row, (p_row, r)) in ds.outer_iter_mut().zip(cache.p.outer_iter().zip(row_dot.iter())) {
            row.scaled_add(-r, &p_row);
        }
        ds *= scale;
        let dq = ds.dot(&cache.k);
        let dk = ds.t().dot(&cache.q);
        grad.wq += &x.t().dot(&dq);
        grad.wk += &x.t().dot(&dk);
        grad.wv += &x.t().dot(&dv);
        g + &dq.dot(&self.wq.t()) + dk.dot(&self.wk.t()) + dv.dot(&self.wv.t())
    }
}

/// All trainable tensors of a student; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    pub frontend: Option<ConvParams>,
    pub conv_sub: Option<ConvParams>,
    pub cif: Option<CifParams>,
    pub encoder: Vec<Dense>,
    pub attention: Option<Attention>,
    /// Transposed convolution for conv subsampling in the upsampling topology.
    pub deconv: Option<DeconvParams>,
    pub heads: Vec<PredictionHead>,
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

impl StudentParams {
    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(p) = &self.frontend {
            out.extend(p.tensors());
        }
        if let Some(p) = &self.conv_sub {
            out.extend(p.tensors());
        }
        if let Some(p) = &self.cif {
            out.extend(p.tensors());
        }
        for l in &self.encoder {
            out.push(slice(&l.weight));
            out.push(slice(&l.bias));
        }
        if let Some(a) = &self.attention {
            out.extend([slice(&a.wq), slice(&a.wk), slice(&a.wv), slice(&a.wo)]);
        }
        if let Some(p) = &self.deconv {
            out.extend(p.tensors());
        }
        for h in &self.heads {
            out.push(slice(&h.weight));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn m<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(p) = &mut self.frontend {
            out.extend(p.tensors_mut());
        }
        if let Some(p) = &mut self.conv_sub {
            out.extend(p.tensors_mut());
        }
        if let Some(p) = &mut self.cif {
            out.extend(p.tensors_mut());
        }
        for l in &mut self.encoder {
            out.push(m(&mut l.weight));
            out.push(m(&mut l.bias));
        }
        if let Some(a) = &mut self.attention {
            out.push(m(&mut a.wq));
            out.push(m(&mut a.wk));
            out.push(m(&mut a.wv));
            out.push(m(&mut a.wo));
        }
        if let Some(p) = &mut self.deconv {
            out.extend(p.tensors_mut());
        }
        for h in &mut self.heads {
            out.push(m(&mut h.weight));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub config: StudentConfig,
    pub params: StudentParams,
}

/// Subsampler state needed for the loss and the backward pass.
pub enum SubState {
    None,
    Avg { stride: usize },
    Conv { stride: usize },
    Cif {
        alpha: AlphaSequence,
        cache: AlphaCache,
        trace: FireTrace,
    },
    Oracle { trace: FireTrace },
}

impl SubState {
    /// Firing trace when the student pooled variable-length segments.
    pub fn trace(&self) -> Option<&FireTrace> {
        match self {
            SubState::Cif { trace, .. } | SubState::Oracle { trace } => Some(trace),
            _ => None,
        }
    }

    pub fn alpha(&self) -> Option<&AlphaSequence> {
        match self {
            SubState::Cif { alpha, .. } => Some(alpha),
            _ => None,
        }
    }
}

/// Forward activations of one utterance.
pub struct Forward {
    input: Array2<f64>,
    /// Subsampler input: front-end output, or the raw input without one.
    pub frontend_out: FrameSequence,
    pub sub: SubState,
    /// Subsampled sequence; `None` when no segment was emitted.
    pub subsampled: Option<FrameSequence>,
    enc_outputs: Vec<Array2<f64>>,
    attention: Option<AttentionCache>,
    /// Encoder output at subsampled length.
    pub output: Option<FrameSequence>,
}

impl Forward {
    /// Subsampling descriptor for the distillation loss.
    pub fn subsampling<'a>(&'a self, student: &'a Student) -> Subsampling<'a> {
        match &self.sub {
            SubState::None => Subsampling::None,
            SubState::Avg { stride } => Subsampling::Average { stride: *stride },
            SubState::Conv { stride } => Subsampling::ConvDeconv {
                stride: *stride,
                deconv: student.params.deconv.as_ref().expect("conv subsampler has a deconvolution"),
            },
            SubState::Cif { trace, .. } | SubState::Oracle { trace } => Subsampling::Segments(trace),
        }
    }

    /// Number of output frames (segments for CIF).
    pub fn output_len(&self) -> usize {
        self.output.as_ref().map_or(0, FrameSequence::len)
    }
}

/// Oracle pooling trace: uniform weights within ground-truth segments.
pub fn oracle_trace(seg: &Segmentation) -> FireTrace {
    FireTrace {
        boundaries: seg.boundaries().to_vec(),
        weights: SegmentWeights::uniform(seg),
        cumulative: Vec::new(),
        total_len: seg.total_len(),
    }
}

impl Student {
    pub fn new<R: Rng + ?Sized>(config: StudentConfig, input_dim: usize, teacher_dim: usize, rng: &mut R) -> Result<Self> {
        if config.heads.is_empty() {
            return Err(Error::InvalidArgument("student needs at least one head".into()));
        }
        if config.hidden_dim == 0 || input_dim == 0 || teacher_dim == 0 || config.frontend_dim == Some(0) {
            return Err(Error::InvalidArgument("student dimensions must be positive".into()));
        }
        let d0 = config.frontend_dim.unwrap_or(input_dim);
        let frontend = config.frontend_dim.map(|h| ConvParams::random(input_dim, h, 1, rng));
        let (conv_sub, cif) = match config.subsampler {
            SubsamplerConfig::Avg { stride } | SubsamplerConfig::Conv { stride } if stride == 0 => {
                return Err(Error::InvalidArgument("stride must be positive".into()));
            }
            SubsamplerConfig::Conv { stride } => (Some(ConvParams::random(d0, d0, stride, rng)), None),
            SubsamplerConfig::Cif { hidden, activation, initial_alpha } => {
                if hidden == 0 || !(initial_alpha > 0.0 && initial_alpha < 1.0) {
                    return Err(Error::InvalidArgument("CIF needs positive width and initial alpha in (0, 1)".into()));
                }
                (None, Some(CifParams::random(d0, hidden, activation, initial_alpha, rng)))
            }
            _ => (None, None),
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        let mut d = d0;
        for _ in 0..config.encoder_layers {
            encoder.push(Dense::random(d, config.hidden_dim, rng));
            d = config.hidden_dim;
        }
        let attention = config.attention.then(|| Attention::random(d, rng));
        let deconv = match config.subsampler {
            SubsamplerConfig::Conv { stride } => Some(DeconvParams::random(d, d, stride, rng)),
            _ => None,
        };
        let heads = config.heads.iter().map(|_| PredictionHead::random(d, teacher_dim, rng)).collect();
        Ok(Self {
            params: StudentParams {
                frontend,
                conv_sub,
                cif,
                encoder,
                attention,
                deconv,
                heads,
            },
            config,
        })
    }

    /// Frame-rate reduction factor of fixed-length subsamplers.
    pub fn fixed_stride(&self) -> Option<usize> {
        match self.config.subsampler {
            SubsamplerConfig::None => Some(1),
            SubsamplerConfig::Avg { stride } | SubsamplerConfig::Conv { stride } => Some(stride),
            _ => None,
        }
    }

    /// `segmentation` is required by the oracle subsampler only.
    pub fn forward(&self, x: &FrameSequence, segmentation: Option<&Segmentation>) -> Result<Forward> {
        let p = &self.params;
        let frontend_out = match &p.frontend {
            Some(fe) => {
                let y = strided_conv(x, fe)?;
                FrameSequence::new(y.data().mapv(f64::tanh), x.frame_period_ms())?
            }
            None => x.clone(),
        };
        let (sub, subsampled) = match self.config.subsampler {
            SubsamplerConfig::None => (SubState::None, Some(frontend_out.clone())),
            SubsamplerConfig::Avg { stride } => (SubState::Avg { stride }, Some(avg_pool(&frontend_out, stride)?)),
            SubsamplerConfig::Conv { stride } => (
                SubState::Conv { stride },
                Some(strided_conv(&frontend_out, p.conv_sub.as_ref().expect("conv params"))?),
            ),
            SubsamplerConfig::Cif { .. } => {
                let (alpha, cache) = predict_alpha_cached(&frontend_out, p.cif.as_ref().expect("cif params"))?;
                let trace = integrate_and_fire(&alpha)?;
                let pooled = if trace.num_segments() == 0 {
                    None
                } else {
                    Some(pool_with_weights(&frontend_out, &trace.weights)?)
                };
                (SubState::Cif { alpha, cache, trace }, pooled)
            }
            SubsamplerConfig::Oracle => {
                let seg = segmentation
                    .ok_or_else(|| Error::InvalidArgument("oracle subsampling needs a segmentation".into()))?;
                if seg.total_len() != x.len() {
                    return Err(Error::ShapeMismatch("segmentation length differs from input".into()));
                }
                let trace = oracle_trace(seg);
                let pooled = pool_with_weights(&frontend_out, &trace.weights)?;
                (SubState::Oracle { trace }, Some(pooled))
            }
        };
        let mut enc_outputs = Vec::with_capacity(p.encoder.len());
        let mut attention = None;
        let output = match &subsampled {
            Some(s) => {
                let mut h = s.data().clone();
                for layer in &p.encoder {
                    h = layer.forward(&h);
                    enc_outputs.push(h.clone());
                }
                if let Some(a) = &p.attention {
                    let (out, cache) = a.forward(&h);
                    h = out;
                    attention = Some(cache);
                }
                Some(FrameSequence::new(h, s.frame_period_ms())?)
            }
            None => None,
        };
        Ok(Forward {
            input: x.data().clone(),
            frontend_out,
            sub,
            subsampled,
            enc_outputs,
            attention,
            output,
        })
    }

    /// Backpropagates `grad_out` (at output length, may be `None` when no
    /// segment was emitted) and `grad_alpha` (extra firing-weight gradient)
    /// into parameter gradients.
    pub fn backward(
        &self,
        fwd: &Forward,
        grad_out: Option<&Array2<f64>>,
        grad_alpha: Option<&[f64]>,
        grad: &mut StudentParams,
    ) {
        let p = &self.params;
        let z = fwd.frontend_out.data();
        let mut dz = Array2::<f64>::zeros(z.dim());
        let mut dalpha = vec![0.0; z.nrows()];
        if let Some(extra) = grad_alpha {
            for (a, b) in dalpha.iter_mut().zip(extra) {
                *a += b;
            }
        }
        if let (Some(g), Some(sub_in)) = (grad_out, &fwd.subsampled) {
            let mut g = g.clone();
            if let (Some(a), Some(cache)) = (&p.attention, &fwd.attention) {
                let x_attn = fwd.enc_outputs.last().unwrap_or(sub_in.data());
                g = a.backward(x_attn, cache, &g, grad.attention.as_mut().expect("attention grad"));
            }
            for (i, layer) in p.encoder.iter().enumerate().rev() {
                let x_in = if i == 0 { sub_in.data() } else { &fwd.enc_outputs[i - 1] };
                g = layer.backward(x_in, &fwd.enc_outputs[i], &g, &mut grad.encoder[i]);
            }
            match &fwd.sub {
                SubState::None => dz += &g,
                SubState::Avg { stride } => dz += &avg_pool_backward(&g, z.nrows(), *stride),
                SubState::Conv { .. } => {
                    let (dx, dp) = strided_conv_backward(z, p.conv_sub.as_ref().expect("conv params"), &g);
                    dz += &dx;
                    let gc = grad.conv_sub.as_mut().expect("conv grad");
                    gc.weight += &dp.weight;
                    gc.bias += &dp.bias;
                }
                SubState::Cif { trace, .. } | SubState::Oracle { trace } => {
                    let (dx, da) = pool_backward(z, &trace.weights, &g);
                    dz += &dx;
                    for (a, b) in dalpha.iter_mut().zip(da) {
                        *a += b;
                    }
                }
            }
        }
        if let SubState::Cif { cache, .. } = &fwd.sub {
            let cif = p.cif.as_ref().expect("cif params");
            let (dx, dp) = predict_alpha_backward(cif, cache, &dalpha);
            dz += &dx;
            let gc = grad.cif.as_mut().expect("cif grad");
            for (a, b) in gc.tensors_mut().into_iter().zip(dp.tensors()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        if let Some(fe) = &p.frontend {
            let dpre = &dz * &z.mapv(|v| 1.0 - v * v);
            let (_, dp) = strided_conv_backward(&fwd.input, fe, &dpre);
            let gf = grad.frontend.as_mut().expect("frontend grad");
            gf.weight += &dp.weight;
            gf.bias += &dp.bias;
        }
    }
}
