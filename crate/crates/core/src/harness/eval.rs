//! Held-out metrics.

use serde::{Deserialize, Serialize};

use super::model::{Student, SubsamplerConfig, ToyTeacher};
use super::synth::Utterance;
use crate::error::{Error, Result};
use crate::fixedsub::{avg_pool, concat_pool};
use crate::guidance::{distance, topology_loss, DistanceConfig, Topology};
use crate::par;
use crate::seqcore::FrameSequence;

/// Boundary matching tolerance in frames.
pub const BOUNDARY_TOLERANCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_utterances: usize,
    /// Distillation loss per compared vector, pooled over the set.
    pub distill_loss: f64,
    pub frame_rate_hz: f64,
    pub frame_period_ms: f64,
    pub output_frames: usize,
    pub input_frames: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy one-to-one matching of boundaries within `tol` frames. The final
/// boundary `total_len` is excluded from both sides. Returns
/// `(hits, reference count, predicted count)`.
pub fn boundary_matches(reference: &[usize], predicted: &[usize], total_len: usize, tol: usize) -> (usize, usize, usize) {
    let refs: Vec<usize> = reference.iter().copied().filter(|&b| b < total_len).collect();
    let preds: Vec<usize> = predicted.iter().copied().filter(|&b| b < total_len).collect();
    let mut used = vec![false; preds.len()];
    let mut hits = 0;
    for &r in &refs {
        let best = preds
            .iter()
            .enumerate()
            .filter(|(i, &p)| !used[*i] && p.abs_diff(r) <= tol)
            .min_by_key(|(_, &p)| p.abs_diff(r));
        if let Some((i, _)) = best {
            used[i] = true;
            hits += 1;
        }
    }
    (hits, refs.len(), preds.len())
}

pub fn precision_recall_f1(hits: usize, n_ref: usize, n_pred: usize) -> (f64, f64, f64) {
    let p = if n_pred == 0 { 0.0 } else { hits as f64 / n_pred as f64 };
    let r = if n_ref == 0 { 0.0 } else { hits as f64 / n_ref as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

struct UttEval {
    distance: f64,
    compared: usize,
    output_len: usize,
    duration_ms: f64,
    hits: usize,
    n_ref: usize,
    n_pred: usize,
}

pub fn evaluate(
    student: &Student,
    teacher: &ToyTeacher,
    data: &[Utterance],
    topology: Topology,
    cfg: &DistanceConfig,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptySequence);
    }
    let per_utt = par::map(data, |u| -> Result<UttEval> {
        let t_len = u.features.len();
        let targets = teacher.targets(&u.features, &student.config.heads)?;
        let fwd = student.forward(&u.features, Some(&u.segmentation))?;
        let (value, compared) = match &fwd.output {
            Some(out) => {
                let o = topology_loss(topology, &targets, out, fwd.subsampling(student), &student.params.heads, cfg)?;
                (o.value, o.compared)
            }
            None => (0.0, 0),
        };
        let predicted: Vec<usize> = match fwd.sub.trace() {
            Some(trace) => trace.boundaries.clone(),
            None => {
                let stride = student.fixed_stride().expect("fixed-length subsampler");
                (1..).map(|j| j * stride).take_while(|&b| b < t_len).collect()
            }
        };
        let (hits, n_ref, n_pred) = boundary_matches(u.segmentation.boundaries(), &predicted, t_len, BOUNDARY_TOLERANCE);
        Ok(UttEval {
            distance: value,
            compared,
            output_len: fwd.output_len(),
            duration_ms: t_len as f64 * u.features.frame_period_ms(),
            hits,
            n_ref,
            n_pred,
        })
    });
    let (mut dist, mut compared, mut out_frames, mut duration_ms) = (0.0, 0, 0, 0.0);
    let (mut hits, mut n_ref, mut n_pred) = (0, 0, 0);
    for r in per_utt {
        let r = r?;
        dist += r.distance;
        compared += r.compared;
        out_frames += r.output_len;
        duration_ms += r.duration_ms;
        hits += r.hits;
        n_ref += r.n_ref;
        n_pred += r.n_pred;
    }
    let (precision, recall, f1) = precision_recall_f1(hits, n_ref, n_pred);
    let rate = out_frames as f64 * 1000.0 / duration_ms;
    Ok(EvalReport {
        n_utterances: data.len(),
        distill_loss: if compared == 0 { f64::NAN } else { dist / compared as f64 },
        frame_rate_hz: rate,
        frame_period_ms: 1000.0 / rate,
        output_frames: out_frames,
        input_frames: data.iter().map(|u| u.features.len()).sum(),
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMethod {
    Cat,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosthocReport {
    pub method: PoolMethod,
    pub stride: usize,
    pub frame_period_ms: f64,
    pub frame_rate_hz: f64,
    pub distill_loss: f64,
}

fn pool(x: &FrameSequence, method: PoolMethod, stride: usize) -> Result<FrameSequence> {
    match method {
        PoolMethod::Cat => concat_pool(x, stride),
        PoolMethod::Avg => avg_pool(x, stride),
    }
}

/// Pools the head predictions of a student trained without subsampling and
/// the teacher targets identically, and compares them.
pub fn posthoc_subsample_eval(
    student: &Student,
    teacher: &ToyTeacher,
    data: &[Utterance],
    stride: usize,
    method: PoolMethod,
    cfg: &DistanceConfig,
) -> Result<PosthocReport> {
    if student.config.subsampler != SubsamplerConfig::None {
        return Err(Error::InvalidArgument("post-hoc subsampling needs a student without subsampler".into()));
    }
    let first = data.first().ok_or(Error::EmptySequence)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if let Some(u) = data.iter().find(|u| u.features.len() < stride) {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} exceeds utterance length {}",
            u.features.len()
        )));
    }
    let per_utt = par::map(data, |u| -> Result<(f64, usize)> {
        let targets = teacher.targets(&u.features, &student.config.heads)?;
        let fwd = student.forward(&u.features, None)?;
        let out = fwd.output.as_ref().expect("no subsampler always emits");
        let mut value = 0.0;
        let mut compared = 0;
        for (target, head) in targets.iter().zip(&student.params.heads) {
            let pred = FrameSequence::new(out.data().dot(&head.weight.t()), out.frame_period_ms())?;
            let pp = pool(&pred, method, stride)?;
            let pt = pool(target, method, stride)?;
            let mut gu = ndarray::Array1::zeros(pt.dim());
            let mut gp = ndarray::Array1::zeros(pt.dim());
            for t in 0..pp.len() {
                value += distance(pt.frame(t), pp.frame(t), cfg, &mut gu, &mut gp);
            }
            compared += pp.len();
        }
        Ok((value, compared))
    });
    let (mut value, mut compared) = (0.0, 0);
    for r in per_utt {
        let (v, c) = r?;
        value += v;
        compared += c;
    }
    let period = first.features.frame_period_ms() * stride as f64;
    Ok(PosthocReport {
        method,
        stride,
        frame_period_ms: period,
        frame_rate_hz: 1000.0 / period,
        distill_loss: value / compared as f64,
    })
}
