//! Seeded training loop.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Student, StudentConfig, StudentParams, ToyTeacher};
use super::optim::{Adam, AdamConfig};
use super::synth::Utterance;
use crate::error::{Error, Result};
use crate::guidance::{guidance_terms, topology_loss, DistanceConfig, LossReport, LossWeights, Topology};
use crate::par;
use crate::seqcore::FrameSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub topology: Topology,
    /// Guidance weights; only used with the CIF subsampler.
    pub weights: LossWeights,
    /// Cardinality target as a fraction of the input length.
    pub card_ratio: f64,
    pub distance: DistanceConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            topology: Topology::SubsampleTargets,
            weights: LossWeights::none(),
            card_ratio: 0.25,
            distance: DistanceConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("steps and batch size must be positive".into()));
        }
        let w = &self.weights;
        if [w.card, w.seg, w.frame].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.card_ratio > 0.0 && self.card_ratio.is_finite()) {
            return Err(Error::InvalidArgument("card_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Utterances paired with the frozen teacher outputs for the student heads.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub utterances: Vec<Utterance>,
    pub targets: Vec<Vec<FrameSequence>>,
}

impl Prepared {
    pub fn new(utterances: Vec<Utterance>, teacher: &ToyTeacher, heads: &[usize]) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::EmptySequence);
        }
        let targets = par::map(&utterances, |u| teacher.targets(&u.features, heads))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Self { utterances, targets })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Loss terms and parameter gradient of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceLoss {
    /// Distillation loss per compared vector; 0 when nothing was emitted.
    pub distill: f64,
    pub card: f64,
    pub seg: f64,
    pub frame: f64,
    pub total: f64,
    pub grad: StudentParams,
}

pub fn utterance_loss(
    student: &Student,
    utt: &Utterance,
    targets: &[FrameSequence],
    cfg: &TrainConfig,
) -> Result<UtteranceLoss> {
    let fwd = student.forward(&utt.features, Some(&utt.segmentation))?;
    let mut grad = student.params.zeros_like();
    let mut grad_alpha: Option<Vec<f64>> = None;
    let mut grad_out = None;
    let mut distill = 0.0;
    if let Some(out) = &fwd.output {
        let o = topology_loss(
            cfg.topology,
            targets,
            out,
            fwd.subsampling(student),
            &student.params.heads,
            &cfg.distance,
        )?;
        let n = (o.compared * data_dim(targets)) as f64;
        distill = o.value / n;
        for (g, h) in grad.heads.iter_mut().zip(&o.grad_heads) {
            g.weight.scaled_add(1.0 / n, h);
        }
        if let (Some(g), Some(d)) = (grad.deconv.as_mut(), &o.grad_deconv) {
            g.weight.scaled_add(1.0 / n, &d.weight);
            g.bias.scaled_add(1.0 / n, &d.bias);
        }
        grad_alpha = o.grad_alpha.map(|a| a.into_iter().map(|v| v / n).collect());
        grad_out = Some(o.grad_student / n);
    }
    let (mut card, mut seg, mut frame) = (0.0, 0.0, 0.0);
    if let Some(alpha) = fwd.sub.alpha() {
        let g = guidance_terms(
            alpha,
            &cfg.weights,
            Some(cfg.card_ratio * alpha.len() as f64),
            Some(&utt.segmentation),
        )?;
        card = g.card;
        seg = g.seg;
        frame = g.frame;
        let acc = grad_alpha.get_or_insert_with(|| vec![0.0; alpha.len()]);
        for (a, b) in acc.iter_mut().zip(&g.grad) {
            *a += b;
        }
    }
    student.backward(&fwd, grad_out.as_ref(), grad_alpha.as_deref(), &mut grad);
    let w = &cfg.weights;
    Ok(UtteranceLoss {
        distill,
        card,
        seg,
        frame,
        total: distill + w.card * card + w.seg * seg + w.frame * frame,
        grad,
    })
}

/// Mean loss and gradient over `batch`, reduced in batch order.
pub fn batch_loss(
    student: &Student,
    data: &Prepared,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossReport, StudentParams)> {
    let results = par::map(batch, |&i| utterance_loss(student, &data.utterances[i], &data.targets[i], cfg));
    let mut grad = student.params.zeros_like();
    let mut report = LossReport {
        step: 0,
        total: 0.0,
        distill: 0.0,
        card: 0.0,
        seg: 0.0,
        frame: 0.0,
    };
    for r in results {
        let r = r?;
        grad.add_assign(&r.grad);
        report.total += r.total;
        report.distill += r.distill;
        report.card += r.card;
        report.seg += r.seg;
        report.frame += r.frame;
    }
    let b = batch.len() as f64;
    grad.scale(1.0 / b);
    for v in [
        &mut report.total,
        &mut report.distill,
        &mut report.card,
        &mut report.seg,
        &mut report.frame,
    ] {
        *v /= b;
    }
    Ok((report, grad))
}

/// Student, optimizer state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub student: Student,
    pub config: TrainConfig,
    pub optimizer: Adam,
    /// Number of completed steps.
    pub step: usize,
    pub input_dim: usize,
    pub teacher_dim: usize,
}

impl Trainer {
    pub fn new(student_cfg: StudentConfig, config: TrainConfig, input_dim: usize, teacher_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student = Student::new(student_cfg, input_dim, teacher_dim, &mut rng)?;
        let optimizer = Adam::new(config.optimizer, &student.params);
        Ok(Self {
            student,
            config,
            optimizer,
            step: 0,
            input_dim,
            teacher_dim,
        })
    }

    /// Utterance indices of batch `step`; a pure function of seed and step.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        if b >= n {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        sample(&mut rng, n, b).into_vec()
    }

    /// Loss of the next step without updating anything.
    pub fn peek_loss(&self, data: &Prepared) -> Result<LossReport> {
        let batch = self.batch_indices(self.step, data.len());
        let (mut report, _) = batch_loss(&self.student, data, &batch, &self.config)?;
        report.step = self.step;
        Ok(report)
    }

    pub fn step(&mut self, data: &Prepared) -> Result<LossReport> {
        let batch = self.batch_indices(self.step, data.len());
        let (mut report, grad) = batch_loss(&self.student, data, &batch, &self.config)?;
        report.step = self.step;
        let finite = report.total.is_finite() && grad.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Divergence { step: self.step });
        }
        self.optimizer.step(&mut self.student.params, &grad);
        self.step += 1;
        Ok(report)
    }

    /// Runs until `config.steps` steps are complete.
    pub fn run(&mut self, data: &Prepared) -> Result<Vec<LossReport>> {
        let mut log = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            log.push(self.step(data)?);
        }
        Ok(log)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub student: Student,
    pub log: Vec<LossReport>,
}

pub fn train(
    data: &[Utterance],
    teacher: &ToyTeacher,
    student_cfg: &StudentConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let input_dim = data.first().ok_or(Error::EmptySequence)?.features.dim();
    let prepared = Prepared::new(data.to_vec(), teacher, &student_cfg.heads)?;
    let mut trainer = Trainer::new(student_cfg.clone(), train_cfg.clone(), input_dim, teacher.dim())?;
    let log = trainer.run(&prepared)?;
    Ok(TrainOutput {
        student: trainer.student,
        log,
    })
}

/// One JSON object per line.
pub fn write_loss_log<W: Write>(log: &[LossReport], mut out: W) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Teacher feature dimension; the distillation loss is averaged over
/// compared vectors and their elements.
pub(crate) fn data_dim(targets: &[FrameSequence]) -> usize {
    targets.first().map_or(1, FrameSequence::dim)
}
