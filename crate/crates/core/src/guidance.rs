//! Boundary guidance for firing weights and the multi-layer distillation
//! objective.
//!
//! * cardinality: `((sum alpha - K) / T)^2`
//! * segment: `sum_k |sum_{j <= t_k} alpha_j - k|`
//! * frame: `|| alpha - alpha_sup ||_1`, with `alpha_sup = 1 / len` inside
//!   every target segment
//! * distillation: `sum_l sum_t d(u_t^l, W^l v_t)`

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cif::{pool_backward, pool_with_weights, segment_upsample, segment_upsample_backward, FireTrace};
use crate::error::{Error, Result};
use crate::fixedsub::{avg_pool, deconv_backward, deconv_upsample, repeat_backward, repeat_upsample, DeconvParams};
use crate::seqcore::{AlphaSequence, FrameSequence, Segmentation};

/// A scalar loss and its (sub)gradient with respect to the firing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub card: f64,
    pub seg: f64,
    pub frame: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            card: 0.5,
            seg: 0.005,
            frame: 0.25,
        }
    }
}

impl LossWeights {
    pub fn none() -> Self {
        Self {
            card: 0.0,
            seg: 0.0,
            frame: 0.0,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cardinality guidance towards `target_count` segments.
pub fn loss_card(alpha: &AlphaSequence, target_count: f64) -> Result<ScalarGrad> {
    let t = alpha.len();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if !(target_count > 0.0 && target_count.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target segment count must be positive, got {target_count}"
        )));
    }
    let t = t as f64;
    let diff = alpha.sum() - target_count;
    Ok(ScalarGrad {
        value: (diff / t).powi(2),
        grad: vec![2.0 * diff / (t * t); alpha.len()],
    })
}

/// Segment guidance: prefix sums at each target boundary should hit `k`.
pub fn loss_seg(alpha: &AlphaSequence, seg: &Segmentation) -> Result<ScalarGrad> {
    let t = alpha.len();
    let last = *seg.boundaries().last().expect("segmentation is nonempty");
    if last > t {
        return Err(Error::InvalidSegmentation(format!(
            "boundary {last} beyond {t} firing weights"
        )));
    }
    let mut prefix = Vec::with_capacity(t);
    let mut acc = 0.0;
    for &a in alpha.values() {
        acc += a;
        prefix.push(acc);
    }
    let mut value = 0.0;
    // suffix-accumulated signs: grad_j = sum over k with t_k >= j+1
    let mut at_boundary = vec![0.0; t];
    for (k, &b) in seg.boundaries().iter().enumerate() {
        let diff = prefix[b - 1] - (k + 1) as f64;
        value += diff.abs();
        at_boundary[b - 1] += sign(diff);
    }
    let mut grad = vec![0.0; t];
    let mut running = 0.0;
    for j in (0..t).rev() {
        running += at_boundary[j];
        grad[j] = running;
    }
    Ok(ScalarGrad { value, grad })
}

/// Per-frame target `1 / (segment length)`; sums to `K`.
pub fn make_alpha_sup(seg: &Segmentation) -> Result<AlphaSequence> {
    if !seg.is_complete() {
        return Err(Error::InvalidSegmentation(format!(
            "final boundary must equal T = {}",
            seg.total_len()
        )));
    }
    let mut values = Vec::with_capacity(seg.total_len());
    for (s, e) in seg.ranges() {
        let w = 1.0 / (e - s) as f64;
        values.extend(std::iter::repeat_n(w, e - s));
    }
    AlphaSequence::new(values)
}

pub fn loss_frame(alpha: &AlphaSequence, alpha_sup: &AlphaSequence) -> Result<ScalarGrad> {
    if alpha.len() != alpha_sup.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} firing weights against {} targets",
            alpha.len(),
            alpha_sup.len()
        )));
    }
    let mut value = 0.0;
    let grad = alpha
        .values()
        .iter()
        .zip(alpha_sup.values())
        .map(|(a, s)| {
            value += (a - s).abs();
            sign(a - s)
        })
        .collect();
    Ok(ScalarGrad { value, grad })
}

/// Projection from student features to one targeted teacher layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    /// `D_teacher x D_student`.
    pub weight: Array2<f64>,
}

impl PredictionHead {
    pub fn new(weight: Array2<f64>) -> Result<Self> {
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction head".into()));
        }
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
        })
    }

    pub fn random<R: Rng + ?Sized>(d_student: usize, d_teacher: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 1.0 / (d_student as f64).sqrt()).unwrap();
        Self {
            weight: Array2::from_shape_fn((d_teacher, d_student), |_| n.sample(rng)),
        }
    }

    pub fn zeros(d_student: usize, d_teacher: usize) -> Self {
        Self {
            weight: Array2::zeros((d_teacher, d_student)),
        }
    }

    pub fn student_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn teacher_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    EuclideanSq,
    L1,
    CosineLogsig,
    #[default]
    L1PlusCosineLogsig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceConfig {
    pub kind: DistanceKind,
    /// Weight of the `-log sigmoid(cos)` term in the combined distance.
    pub cosine_weight: f64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            kind: DistanceKind::default(),
            cosine_weight: 1.0,
        }
    }
}

impl DistanceConfig {
    pub fn euclidean_sq() -> Self {
        Self {
            kind: DistanceKind::EuclideanSq,
            cosine_weight: 0.0,
        }
    }
}

const NORM_EPS: f64 = 1e-8;

fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(cos(u, p))` with gradients for `u` and `p`. Vectors with a
/// norm below `1e-8` give cosine 0 and no gradient.
fn cosine_logsig(u: ArrayView1<f64>, p: ArrayView1<f64>, gu: &mut Array1<f64>, gp: &mut Array1<f64>, scale: f64) -> f64 {
    let nu = u.dot(&u).sqrt();
    let np = p.dot(&p).sqrt();
    if nu < NORM_EPS || np < NORM_EPS {
        return -log_sigmoid(0.0) * scale;
    }
    let c = u.dot(&p) / (nu * np);
    let dc = (sigmoid(c) - 1.0) * scale;
    gp.scaled_add(dc / (nu * np), &u);
    gp.scaled_add(-dc * c / (np * np), &p);
    gu.scaled_add(dc / (nu * np), &p);
    gu.scaled_add(-dc * c / (nu * nu), &u);
    -log_sigmoid(c) * scale
}

/// Distance `d(u, p)`; accumulates `dd/du` into `gu` and `dd/dp` into `gp`.
pub fn distance(
    u: ArrayView1<f64>,
    p: ArrayView1<f64>,
    cfg: &DistanceConfig,
    gu: &mut Array1<f64>,
    gp: &mut Array1<f64>,
) -> f64 {
    let mut value = 0.0;
    match cfg.kind {
        DistanceKind::EuclideanSq => {
            for i in 0..u.len() {
                let r = u[i] - p[i];
                value += r * r;
                gu[i] += 2.0 * r;
                gp[i] -= 2.0 * r;
            }
        }
        DistanceKind::L1 | DistanceKind::L1PlusCosineLogsig => {
            for i in 0..u.len() {
                let r = u[i] - p[i];
                value += r.abs();
                gu[i] += sign(r);
                gp[i] -= sign(r);
            }
            if cfg.kind == DistanceKind::L1PlusCosineLogsig && cfg.cosine_weight != 0.0 {
                value += cosine_logsig(u, p, gu, gp, cfg.cosine_weight);
            }
        }
        DistanceKind::CosineLogsig => {
            value += cosine_logsig(u, p, gu, gp, 1.0);
        }
    }
    value
}

/// Value and gradients of the distillation objective.
#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub value: f64,
    pub grad_student: Array2<f64>,
    pub grad_heads: Vec<Array2<f64>>,
    /// Gradient with respect to each teacher target sequence.
    pub grad_targets: Vec<Array2<f64>>,
    /// Number of compared frame pairs summed over layers.
    pub compared: usize,
}

/// `sum_l sum_t d(u_t^l, W^l v_t)`.
pub fn distill_loss(
    teacher: &[FrameSequence],
    student: &FrameSequence,
    heads: &[PredictionHead],
    cfg: &DistanceConfig,
) -> Result<DistillOutput> {
    if teacher.len() != heads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} teacher layers for {} heads",
            teacher.len(),
            heads.len()
        )));
    }
    let v = student.data();
    let mut value = 0.0;
    let mut grad_student = Array2::zeros(v.dim());
    let mut grad_heads = Vec::with_capacity(heads.len());
    let mut grad_targets = Vec::with_capacity(heads.len());
    for (u, head) in teacher.iter().zip(heads) {
        if u.len() != student.len() {
            return Err(Error::ShapeMismatch(format!(
                "teacher has {} frames, student {}",
                u.len(),
                student.len()
            )));
        }
        if head.student_dim() != student.dim() || head.teacher_dim() != u.dim() {
            return Err(Error::ShapeMismatch(format!(
                "head {}x{} for teacher dim {} and student dim {}",
                head.teacher_dim(),
                head.student_dim(),
                u.dim(),
                student.dim()
            )));
        }
        let pred = v.dot(&head.weight.t());
        let mut gpred = Array2::zeros(pred.dim());
        let mut gu = Array2::zeros(u.data().dim());
        for t in 0..pred.nrows() {
            let mut gu_t = Array1::zeros(u.dim());
            let mut gp_t = Array1::zeros(u.dim());
            value += distance(u.frame(t), pred.row(t), cfg, &mut gu_t, &mut gp_t);
            gu.row_mut(t).assign(&gu_t);
            gpred.row_mut(t).assign(&gp_t);
        }
        grad_heads.push(gpred.t().dot(v));
        grad_student += &gpred.dot(&head.weight);
        grad_targets.push(gu);
    }
    Ok(DistillOutput {
        value,
        grad_student,
        grad_heads,
        grad_targets,
        compared: teacher.len() * student.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Student subsampled, encoded, upsampled back to `T`; full-length targets.
    SubsampleUpsample,
    /// Teacher targets pooled identically to the student input.
    SubsampleTargets,
}

/// How the student sequence was shortened.
#[derive(Debug, Clone, Copy)]
pub enum Subsampling<'a> {
    None,
    /// Average pooling; repeat upsampling in the first topology.
    Average { stride: usize },
    /// Strided convolution; transposed convolution upsampling in the first
    /// topology, average-pooled targets cut to the student length in the
    /// second.
    ConvDeconv { stride: usize, deconv: &'a DeconvParams },
    /// Variable-length segments; segment repetition upsampling in the first
    /// topology, targets pooled with the same weights in the second.
    Segments(&'a FireTrace),
}

#[derive(Debug, Clone)]
pub struct TopologyOutput {
    pub value: f64,
    /// Gradient with respect to the student output at subsampled length.
    pub grad_student: Array2<f64>,
    pub grad_heads: Vec<Array2<f64>>,
    pub grad_deconv: Option<DeconvParams>,
    /// Gradient reaching the firing weights through the pooled targets.
    pub grad_alpha: Option<Vec<f64>>,
    pub compared: usize,
}

/// Distillation loss under either topology. `teacher` holds full-length
/// layer outputs; `student_out` is the encoder output at subsampled length.
pub fn topology_loss(
    mode: Topology,
    teacher: &[FrameSequence],
    student_out: &FrameSequence,
    sub: Subsampling<'_>,
    heads: &[PredictionHead],
    cfg: &DistanceConfig,
) -> Result<TopologyOutput> {
    let full_len = teacher.first().map(FrameSequence::len).ok_or_else(|| {
        Error::ShapeMismatch("no teacher layers".into())
    })?;
    match (mode, sub) {
        (_, Subsampling::None) => {
            let out = distill_loss(teacher, student_out, heads, cfg)?;
            Ok(TopologyOutput {
                value: out.value,
                grad_student: out.grad_student,
                grad_heads: out.grad_heads,
                grad_deconv: None,
                grad_alpha: None,
                compared: out.compared,
            })
        }
        (Topology::SubsampleUpsample, sub) => {
            let (up, back): (FrameSequence, Box<dyn Fn(&Array2<f64>) -> (Array2<f64>, Option<DeconvParams>)>) = match sub {
                Subsampling::Average { stride } => (
                    repeat_upsample(student_out, stride, full_len)?,
                    Box::new(move |g| (repeat_backward(g, stride, student_out.len()), None)),
                ),
                Subsampling::ConvDeconv { deconv, .. } => (
                    deconv_upsample(student_out, deconv, full_len)?,
                    Box::new(move |g| {
                        let (dy, dp) = deconv_backward(student_out.data(), deconv, g);
                        (dy, Some(dp))
                    }),
                ),
                Subsampling::Segments(trace) => {
                    if trace.total_len != full_len {
                        return Err(Error::ShapeMismatch("trace length differs from teacher".into()));
                    }
                    (
                        segment_upsample(student_out, &trace.boundaries, full_len)?,
                        Box::new(move |g| (segment_upsample_backward(g, &trace.boundaries), None)),
                    )
                }
                Subsampling::None => unreachable!(),
            };
            let out = distill_loss(teacher, &up, heads, cfg)?;
            let (grad_student, grad_deconv) = back(&out.grad_student);
            Ok(TopologyOutput {
                value: out.value,
                grad_student,
                grad_heads: out.grad_heads,
                grad_deconv,
                grad_alpha: None,
                compared: out.compared,
            })
        }
        (Topology::SubsampleTargets, sub) => {
            let targets: Vec<FrameSequence> = match sub {
                Subsampling::Average { stride } | Subsampling::ConvDeconv { stride, .. } => teacher
                    .iter()
                    .map(|u| {
                        let pooled = avg_pool(u, stride)?;
                        if pooled.len() < student_out.len() {
                            return Err(Error::ShapeMismatch("student longer than pooled targets".into()));
                        }
                        let cut = pooled.data().slice(ndarray::s![..student_out.len(), ..]).to_owned();
                        FrameSequence::new(cut, pooled.frame_period_ms())
                    })
                    .collect::<Result<_>>()?,
                Subsampling::Segments(trace) => teacher
                    .iter()
                    .map(|u| {
                        if u.len() != trace.total_len {
                            return Err(Error::ShapeMismatch("trace length differs from teacher".into()));
                        }
                        pool_with_weights(u, &trace.weights)
                    })
                    .collect::<Result<_>>()?,
                Subsampling::None => unreachable!(),
            };
            let out = distill_loss(&targets, student_out, heads, cfg)?;
            let grad_alpha = match sub {
                Subsampling::Segments(trace) => {
                    let mut acc = vec![0.0; full_len];
                    for (u, g) in teacher.iter().zip(&out.grad_targets) {
                        let (_, da) = pool_backward(u.data(), &trace.weights, g);
                        for (a, d) in acc.iter_mut().zip(da) {
                            *a += d;
                        }
                    }
                    Some(acc)
                }
                _ => None,
            };
            Ok(TopologyOutput {
                value: out.value,
                grad_student: out.grad_student,
                grad_heads: out.grad_heads,
                grad_deconv: None,
                grad_alpha,
                compared: out.compared,
            })
        }
    }
}

/// Guidance terms on one firing sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutput {
    pub card: f64,
    pub seg: f64,
    pub frame: f64,
    /// Weighted gradient `w_card * dcard + w_seg * dseg + w_frame * dframe`.
    pub grad: Vec<f64>,
}

/// Evaluates the guidance terms enabled by nonzero weights. `target_count`
/// is required when `weights.card > 0`, `segmentation` when seg or frame
/// guidance is on.
pub fn guidance_terms(
    alpha: &AlphaSequence,
    weights: &LossWeights,
    target_count: Option<f64>,
    segmentation: Option<&Segmentation>,
) -> Result<GuidanceOutput> {
    let mut grad = vec![0.0; alpha.len()];
    let mut add = |g: &[f64], w: f64| {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += w * b;
        }
    };
    let mut out = GuidanceOutput {
        card: 0.0,
        seg: 0.0,
        frame: 0.0,
        grad: Vec::new(),
    };
    if weights.card > 0.0 {
        let k = target_count.ok_or_else(|| Error::InvalidArgument("cardinality guidance needs a target count".into()))?;
        let l = loss_card(alpha, k)?;
        out.card = l.value;
        add(&l.grad, weights.card);
    }
    if weights.seg > 0.0 || weights.frame > 0.0 {
        let seg = segmentation.ok_or_else(|| Error::InvalidArgument("segmentation guidance needs a segmentation".into()))?;
        if weights.seg > 0.0 {
            let l = loss_seg(alpha, seg)?;
            out.seg = l.value;
            add(&l.grad, weights.seg);
        }
        if weights.frame > 0.0 {
            let l = loss_frame(alpha, &make_alpha_sup(seg)?)?;
            out.frame = l.value;
            add(&l.grad, weights.frame);
        }
    }
    out.grad = grad;
    Ok(out)
}

/// One JSON line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub distill: f64,
    pub card: f64,
    pub seg: f64,
    pub frame: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cif::integrate_and_fire;
    use crate::seqcore::{grad_check, grad_check_piecewise};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn alpha(v: &[f64]) -> AlphaSequence {
        AlphaSequence::new(v.to_vec()).unwrap()
    }

    fn random_seq(t: usize, d: usize, rng: &mut ChaCha8Rng) -> FrameSequence {
        let n = Normal::new(0.0, 1.0).unwrap();
        FrameSequence::new(Array2::from_shape_fn((t, d), |_| n.sample(rng)), 20.0).unwrap()
    }

    #[test]
    fn card_values() {
        assert_eq!(loss_card(&alpha(&[0.5, 0.5]), 1.0).unwrap().value, 0.0);
        assert!((loss_card(&alpha(&[0.5; 4]), 1.0).unwrap().value - 0.0625).abs() < 1e-15);
        assert!(loss_card(&alpha(&[]), 1.0).is_err());
    }

    #[test]
    fn card_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = loss_card(&alpha(&a), 4.0).unwrap().grad;
        let r = grad_check(|v| loss_card(&alpha(v), 4.0).unwrap().value, &a, &g, 1e-5).unwrap();
        assert!(r.passes(1e-6), "{}", r.max_rel_err);
    }

    #[test]
    fn seg_values() {
        let seg = Segmentation::new(vec![2, 4], None, 4).unwrap();
        assert_eq!(loss_seg(&alpha(&[0.5; 4]), &seg).unwrap().value, 0.0);
        let v = loss_seg(&alpha(&[0.8, 0.4, 0.4, 0.4]), &seg).unwrap().value;
        assert!((v - 0.2).abs() < 1e-12);
        let long = Segmentation::new(vec![2, 5], None, 5).unwrap();
        assert!(loss_seg(&alpha(&[0.5; 4]), &long).is_err());
    }

    #[test]
    fn seg_gradient_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.9)).collect();
        let seg = Segmentation::new(vec![3, 5, 9, 12], None, 12).unwrap();
        let g = loss_seg(&alpha(&a), &seg).unwrap().grad;
        let signs = |v: &[f64]| {
            let mut acc = 0.0;
            let prefix: Vec<f64> = v.iter().map(|x| { acc += x; acc }).collect();
            seg.boundaries().iter().enumerate().map(|(k, &b)| prefix[b - 1] > (k + 1) as f64).collect::<Vec<_>>()
        };
        let r = grad_check_piecewise(|v| loss_seg(&alpha(v), &seg).unwrap().value, signs, &a, &g, 1e-4).unwrap();
        assert!(r.passes(1e-4), "{}", r.max_rel_err);
    }

    #[test]
    fn alpha_sup_values() {
        let seg = Segmentation::new(vec![2, 4], None, 4).unwrap();
        assert_eq!(make_alpha_sup(&seg).unwrap().values(), &[0.5; 4]);
        let seg = Segmentation::new(vec![1, 4], None, 4).unwrap();
        let sup = make_alpha_sup(&seg).unwrap();
        assert_eq!(sup.values(), &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!((sup.sum() - 2.0).abs() < 1e-12);
        let partial = Segmentation::new(vec![1, 3], None, 4).unwrap();
        assert!(make_alpha_sup(&partial).is_err());
    }

    #[test]
    fn frame_values_and_gradient() {
        assert_eq!(loss_frame(&alpha(&[0.5, 0.5]), &alpha(&[0.5, 0.5])).unwrap().value, 0.0);
        let v = loss_frame(&alpha(&[0.6, 0.4]), &alpha(&[0.5, 0.5])).unwrap().value;
        assert!((v - 0.2).abs() < 1e-12);
        assert!(loss_frame(&alpha(&[0.6]), &alpha(&[0.5, 0.5])).is_err());
        let sup = alpha(&[0.25, 0.25, 0.25, 0.25, 0.5, 0.5]);
        let a = vec![0.1, 0.3, 0.6, 0.2, 0.45, 0.9];
        let g = loss_frame(&alpha(&a), &sup).unwrap().grad;
        let r = grad_check(|v| loss_frame(&alpha(v), &sup).unwrap().value, &a, &g, 1e-4).unwrap();
        assert!(r.passes(1e-4));
    }

    #[test]
    fn distill_simple_cases() {
        let head = PredictionHead::new(Array2::eye(2)).unwrap();
        let u = FrameSequence::from_rows(&[vec![1.0, 0.0]], 20.0).unwrap();
        let v = FrameSequence::from_rows(&[vec![0.0, 1.0]], 20.0).unwrap();
        let out = distill_loss(std::slice::from_ref(&u), &v, std::slice::from_ref(&head), &DistanceConfig::euclidean_sq()).unwrap();
        assert_eq!(out.value, 2.0);
        let same = distill_loss(std::slice::from_ref(&u), &u, std::slice::from_ref(&head), &DistanceConfig::euclidean_sq()).unwrap();
        assert_eq!(same.value, 0.0);
        let two = FrameSequence::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]], 20.0).unwrap();
        assert!(distill_loss(&[two], &v, &[head], &DistanceConfig::euclidean_sq()).is_err());
    }

    fn check_distill(cfg: DistanceConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let teacher = vec![random_seq(5, 3, &mut rng), random_seq(5, 3, &mut rng)];
        let v = random_seq(5, 4, &mut rng);
        let heads = vec![PredictionHead::random(4, 3, &mut rng), PredictionHead::random(4, 3, &mut rng)];
        let out = distill_loss(&teacher, &v, &heads, &cfg).unwrap();
        let vs: Vec<f64> = v.data().iter().copied().collect();
        let signs = |vals: &[f64], heads: &[PredictionHead]| -> Vec<bool> {
            let vv = Array2::from_shape_vec((5, 4), vals.to_vec()).unwrap();
            heads.iter().zip(&teacher).flat_map(|(h, u)| {
                let p = vv.dot(&h.weight.t());
                (u.data() - &p).iter().map(|r| *r > 0.0).collect::<Vec<_>>()
            }).collect()
        };
        let r = grad_check_piecewise(
            |vals| {
                let vv = FrameSequence::new(Array2::from_shape_vec((5, 4), vals.to_vec()).unwrap(), 20.0).unwrap();
                distill_loss(&teacher, &vv, &heads, &cfg).unwrap().value
            },
            |vals| signs(vals, &heads),
            &vs,
            out.grad_student.as_slice().unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{cfg:?} student {}", r.max_rel_err);
        let hs: Vec<f64> = heads[1].weight.iter().copied().collect();
        let r = grad_check_piecewise(
            |w| {
                let mut hh = heads.clone();
                hh[1].weight = Array2::from_shape_vec((3, 4), w.to_vec()).unwrap();
                distill_loss(&teacher, &v, &hh, &cfg).unwrap().value
            },
            |w| {
                let mut hh = heads.clone();
                hh[1].weight = Array2::from_shape_vec((3, 4), w.to_vec()).unwrap();
                signs(&vs, &hh)
            },
            &hs,
            out.grad_heads[1].as_slice().unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{cfg:?} head {}", r.max_rel_err);
        let us: Vec<f64> = teacher[0].data().iter().copied().collect();
        let r = grad_check_piecewise(
            |vals| {
                let mut tt = teacher.clone();
                tt[0] = FrameSequence::new(Array2::from_shape_vec((5, 3), vals.to_vec()).unwrap(), 20.0).unwrap();
                distill_loss(&tt, &v, &heads, &cfg).unwrap().value
            },
            |vals| {
                let p = v.data().dot(&heads[0].weight.t());
                let uu = Array2::from_shape_vec((5, 3), vals.to_vec()).unwrap();
                (uu - p).iter().map(|r| *r > 0.0).collect::<Vec<_>>()
            },
            &us,
            out.grad_targets[0].as_slice().unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{cfg:?} target {}", r.max_rel_err);
    }

    #[test]
    fn distill_gradients_all_distances() {
        for kind in [DistanceKind::EuclideanSq, DistanceKind::L1, DistanceKind::CosineLogsig, DistanceKind::L1PlusCosineLogsig] {
            check_distill(DistanceConfig { kind, cosine_weight: 0.7 });
        }
    }

    #[test]
    fn topology_no_subsampling_is_plain_distill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let teacher = vec![random_seq(6, 2, &mut rng)];
        let v = random_seq(6, 3, &mut rng);
        let heads = vec![PredictionHead::random(3, 2, &mut rng)];
        let cfg = DistanceConfig::default();
        let plain = distill_loss(&teacher, &v, &heads, &cfg).unwrap().value;
        for mode in [Topology::SubsampleUpsample, Topology::SubsampleTargets] {
            for sub in [Subsampling::None, Subsampling::Average { stride: 1 }] {
                let out = topology_loss(mode, &teacher, &v, sub, &heads, &cfg).unwrap();
                assert_eq!(out.value, plain);
            }
        }
    }

    #[test]
    fn topology_targets_with_half_alpha_is_avg_pooled_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let teacher = vec![random_seq(8, 2, &mut rng)];
        let x = random_seq(8, 3, &mut rng);
        let heads = vec![PredictionHead::random(3, 2, &mut rng)];
        let cfg = DistanceConfig::default();
        let trace = integrate_and_fire(&AlphaSequence::constant(0.5, 8).unwrap()).unwrap();
        let student = crate::cif::segment_pool(&x, &trace).unwrap();
        let out = topology_loss(Topology::SubsampleTargets, &teacher, &student, Subsampling::Segments(&trace), &heads, &cfg).unwrap();
        let pooled_t = avg_pool(&teacher[0], 2).unwrap();
        let pooled_s = avg_pool(&x, 2).unwrap();
        let expect = distill_loss(&[pooled_t], &pooled_s, &heads, &cfg).unwrap().value;
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn topology_avg_repeat_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let teacher = vec![random_seq(5, 2, &mut rng)];
        let x = random_seq(5, 2, &mut rng);
        let heads = vec![PredictionHead::random(2, 2, &mut rng)];
        let cfg = DistanceConfig::euclidean_sq();
        let student = avg_pool(&x, 2).unwrap();
        let out = topology_loss(Topology::SubsampleUpsample, &teacher, &student, Subsampling::Average { stride: 2 }, &heads, &cfg).unwrap();
        // hand-composed: frame t compares against W * mean(window(t))
        let mut expect = 0.0;
        for t in 0..5 {
            let j = t / 2;
            let end = (2 * j + 2).min(5);
            let mut mean = Array1::<f64>::zeros(2);
            for s in 2 * j..end {
                mean += &x.data().row(s);
            }
            mean /= (end - 2 * j) as f64;
            let p = heads[0].weight.dot(&mean);
            expect += (&teacher[0].data().row(t) - &p).mapv(|r| r * r).sum();
        }
        assert!((out.value - expect).abs() < 1e-12);
        // gradient wrt the pooled student
        let vs: Vec<f64> = student.data().iter().copied().collect();
        let r = grad_check(
            |vals| {
                let s = FrameSequence::new(Array2::from_shape_vec((3, 2), vals.to_vec()).unwrap(), 40.0).unwrap();
                topology_loss(Topology::SubsampleUpsample, &teacher, &s, Subsampling::Average { stride: 2 }, &heads, &cfg).unwrap().value
            },
            &vs,
            out.grad_student.as_slice().unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(r.passes(1e-4));
    }

    #[test]
    fn topology_targets_alpha_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let teacher = vec![random_seq(10, 2, &mut rng)];
        let heads = vec![PredictionHead::random(2, 2, &mut rng)];
        let cfg = DistanceConfig::euclidean_sq();
        let a0: Vec<f64> = (0..10).map(|_| rng.random_range(0.2..0.8)).collect();
        let trace = integrate_and_fire(&alpha(&a0)).unwrap();
        let student = random_seq(trace.num_segments(), 2, &mut rng);
        let out = topology_loss(Topology::SubsampleTargets, &teacher, &student, Subsampling::Segments(&trace), &heads, &cfg).unwrap();
        let r = grad_check_piecewise(
            |a| {
                let tr = integrate_and_fire(&alpha(a)).unwrap();
                topology_loss(Topology::SubsampleTargets, &teacher, &student, Subsampling::Segments(&tr), &heads, &cfg).map(|o| o.value).unwrap_or(0.0)
            },
            |a| integrate_and_fire(&alpha(a)).unwrap().pattern(),
            &a0,
            out.grad_alpha.as_ref().unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{}", r.max_rel_err);
    }

    #[test]
    fn guidance_combination() {
        let seg = Segmentation::new(vec![2, 4], None, 4).unwrap();
        let a = alpha(&[0.6, 0.4, 0.5, 0.5]);
        let g = guidance_terms(&a, &LossWeights::default(), Some(1.0), Some(&seg)).unwrap();
        assert!((g.card - 0.0625).abs() < 1e-12);
        assert!((g.frame - 0.2).abs() < 1e-12);
        assert!(g.seg.abs() < 1e-12);
        assert!(guidance_terms(&a, &LossWeights::default(), None, Some(&seg)).is_err());
        let none = guidance_terms(&a, &LossWeights::none(), None, None).unwrap();
        assert_eq!(none.grad, vec![0.0; 4]);
    }

    #[test]
    fn identity_head_zero_loss() {
        let v = FrameSequence::new(array![[1.0, 2.0], [0.5, -1.0]], 20.0).unwrap();
        let head = PredictionHead::new(Array2::eye(2)).unwrap();
        let out = distill_loss(std::slice::from_ref(&v), &v, &[head], &DistanceConfig::euclidean_sq()).unwrap();
        assert_eq!(out.value, 0.0);
    }
}
