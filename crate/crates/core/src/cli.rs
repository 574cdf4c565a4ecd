//! Command-line front end. Every subcommand writes machine-readable files
//! only; paths inside JSON job files are resolved against the job file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{macs_vs_frame_rate, unit_frame_rate, write_macs_csv, LayerSpec};
use crate::error::{Error, Result};
use crate::fixedsub::{avg_pool, concat_pool};
use crate::harness::{
    evaluate, load_checkpoint, posthoc_subsample_eval, save_checkpoint, synth_data, write_loss_log, EvalReport,
    PoolMethod, PosthocReport, Prepared, StudentConfig, SynthConfig, TeacherConfig, ToyTeacher, TrainConfig, Trainer,
    Utterance,
};
use crate::par;
use crate::segmenters::{
    code_distances, dp_smooth, kmeans_fit, lambda_sweep, overwrite_silence, read_silence_mask, DpConfig,
};
use crate::seqcore::{load_frames, save_frames, save_segmentation, FrameSequence};

#[derive(Debug, Parser)]
#[command(name = "seqcompress", version, about = "Sequence subsampling, segmentation and distillation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a student against the toy teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on held-out utterances.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cluster frames and smooth the codes into segmentations.
    Segment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pool a feature file by a fixed stride.
    Subsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// MACs and MACs-C per subsampling stride.
    Macs {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        len: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        strides: Vec<usize>,
        /// Frame period at the subsampling point before subsampling.
        #[arg(long, default_value_t = 20.0)]
        period_ms: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled unit rate from a `count,seconds` CSV.
    Framerate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Avg,
    Cat,
}

fn read_job<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let job = serde_json::from_str(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((job, base))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthJob {
    synth: SynthConfig,
    out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    features: String,
    segmentation: String,
}

fn run_synth(config: &Path) -> Result<()> {
    let (job, base): (SynthJob, _) = read_job(config)?;
    let dir = resolve(&base, &job.out_dir);
    fs::create_dir_all(&dir)?;
    let data = synth_data(&job.synth)?;
    let mut manifest = Vec::with_capacity(data.len());
    for (i, u) in data.iter().enumerate() {
        let entry = ManifestEntry {
            features: format!("utt{i:05}.sqp"),
            segmentation: format!("utt{i:05}.json"),
        };
        save_frames(&u.features, dir.join(&entry.features))?;
        save_segmentation(&u.segmentation, dir.join(&entry.segmentation))?;
        manifest.push(entry);
    }
    write_json(&manifest, &dir.join("manifest.json"))
}

/// Corpus generated from `synth`; the last `held_out` utterances are
/// reserved for evaluation.
fn split(synth: &SynthConfig, held_out: usize) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let mut train = synth_data(synth)?;
    if held_out >= train.len() {
        return Err(Error::InvalidArgument(format!(
            "held_out = {held_out} leaves no training utterances out of {}",
            train.len()
        )));
    }
    let test = train.split_off(train.len() - held_out);
    Ok((train, test))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    synth: SynthConfig,
    #[serde(default)]
    held_out: usize,
    #[serde(default)]
    teacher: TeacherConfig,
    #[serde(default)]
    student: StudentConfig,
    #[serde(default)]
    train: TrainConfig,
    log: PathBuf,
    checkpoint: PathBuf,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[serde(default)]
    resume: Option<PathBuf>,
}

fn run_train(config: &Path) -> Result<()> {
    let (job, base): (TrainJob, _) = read_job(config)?;
    let (train, _) = split(&job.synth, job.held_out)?;
    let teacher = ToyTeacher::new(job.synth.dim, &job.teacher)?;
    let mut trainer = match &job.resume {
        Some(p) => {
            let mut t = load_checkpoint(resolve(&base, p))?;
            t.config.steps = job.train.steps;
            t
        }
        None => Trainer::new(job.student, job.train, job.synth.dim, teacher.dim())?,
    };
    let prepared = Prepared::new(train, &teacher, &trainer.student.config.heads)?;
    let log = trainer.run(&prepared)?;
    write_loss_log(&log, fs::File::create(resolve(&base, &job.log))?)?;
    save_checkpoint(&trainer, resolve(&base, &job.checkpoint))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosthocJob {
    strides: Vec<usize>,
    method: PoolMethod,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalJob {
    synth: SynthConfig,
    #[serde(default)]
    held_out: usize,
    #[serde(default)]
    teacher: TeacherConfig,
    checkpoint: PathBuf,
    out: PathBuf,
    #[serde(default)]
    posthoc: Option<PosthocJob>,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    eval: EvalReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    posthoc: Vec<PosthocReport>,
}

fn run_eval(config: &Path) -> Result<()> {
    let (job, base): (EvalJob, _) = read_job(config)?;
    let trainer = load_checkpoint(resolve(&base, &job.checkpoint))?;
    let data = if job.held_out == 0 {
        synth_data(&job.synth)?
    } else {
        split(&job.synth, job.held_out)?.1
    };
    let teacher = ToyTeacher::new(job.synth.dim, &job.teacher)?;
    let student = &trainer.student;
    let distance = &trainer.config.distance;
    let eval = evaluate(student, &teacher, &data, trainer.config.topology, distance)?;
    let posthoc = match &job.posthoc {
        Some(p) => p
            .strides
            .iter()
            .map(|&f| posthoc_subsample_eval(student, &teacher, &data, f, p.method, distance))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    write_json(&EvalOutput { eval, posthoc }, &resolve(&base, &job.out))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentJob {
    features: Vec<PathBuf>,
    num_codes: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_kmeans_iters")]
    kmeans_iters: usize,
    /// Fixed segment penalty; exclusive with `target_rate_hz`.
    #[serde(default)]
    lambda: Option<f64>,
    #[serde(default)]
    target_rate_hz: Option<f64>,
    /// One `0`/`1` mask file per feature file.
    #[serde(default)]
    silence: Option<Vec<PathBuf>>,
    out_dir: PathBuf,
}

fn default_kmeans_iters() -> usize {
    50
}

#[derive(Debug, Serialize)]
struct SegmentSummary {
    lambda: f64,
    rate_hz: f64,
    sweep_iterations: usize,
    converged: bool,
    files: Vec<String>,
}

fn run_segment(config: &Path) -> Result<()> {
    let (job, base): (SegmentJob, _) = read_job(config)?;
    if job.features.is_empty() {
        return Err(Error::InvalidArgument("no feature files".into()));
    }
    let feats: Vec<FrameSequence> = job
        .features
        .iter()
        .map(|p| load_frames(resolve(&base, p)))
        .collect::<Result<_>>()?;
    let period = feats[0].frame_period_ms();
    if feats.iter().any(|f| f.frame_period_ms() != period) {
        return Err(Error::InvalidArgument("feature files differ in frame period".into()));
    }
    let codebook = kmeans_fit(&feats, job.num_codes, job.seed, job.kmeans_iters)?;
    let dists = par::map(&feats, |f| code_distances(f, &codebook))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (lambda, sweep) = match (job.lambda, job.target_rate_hz) {
        (Some(l), None) => (l, None),
        (None, Some(rate)) => {
            let s = lambda_sweep(&dists, rate, period)?;
            (s.lambda, Some(s))
        }
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of lambda and target_rate_hz must be given".into(),
            ))
        }
    };
    let masks = match &job.silence {
        Some(paths) if paths.len() != feats.len() => {
            return Err(Error::InvalidArgument("one silence mask per feature file is required".into()));
        }
        Some(paths) => Some(
            paths
                .iter()
                .map(|p| read_silence_mask(resolve(&base, p)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let results = par::map_range(dists.len(), |i| dp_smooth(&dists[i], &DpConfig { lambda }))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let dir = resolve(&base, &job.out_dir);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(results.len());
    let mut segments = 0;
    let mut frames = 0;
    for (i, r) in results.iter().enumerate() {
        let seg = match &masks {
            Some(m) => overwrite_silence(&r.segmentation, &m[i])?,
            None => r.segmentation.clone(),
        };
        segments += seg.num_segments();
        frames += seg.total_len();
        let stem = job.features[i]
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("utt{i:05}"));
        let name = format!("{stem}.json");
        save_segmentation(&seg, dir.join(&name))?;
        files.push(name);
    }
    let summary = SegmentSummary {
        lambda,
        rate_hz: segments as f64 * 1000.0 / (frames as f64 * period),
        sweep_iterations: sweep.map_or(0, |s| s.iterations),
        converged: sweep.is_none_or(|s| s.converged),
        files,
    };
    write_json(&summary, &dir.join("summary.json"))
}

fn run_subsample(input: &Path, method: Method, stride: usize, out: &Path) -> Result<()> {
    let x = load_frames(input)?;
    let y = match method {
        Method::Avg => avg_pool(&x, stride)?,
        Method::Cat => concat_pool(&x, stride)?,
    };
    save_frames(&y, out)
}

fn run_macs(model: &Path, len: usize, strides: &[usize], period_ms: f64, out: &Path) -> Result<()> {
    let layers: Vec<LayerSpec> = serde_json::from_str(&fs::read_to_string(model)?)?;
    let rows = macs_vs_frame_rate(&layers, strides, len, period_ms)?;
    write_macs_csv(&rows, fs::File::create(out)?)
}

#[derive(Debug, Deserialize)]
struct UnitRow {
    count: u64,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct FrameRateOutput {
    rate_hz: f64,
    utterances: usize,
    units: u64,
    seconds: f64,
}

fn run_framerate(input: &Path, out: &Path) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(input)?;
    let rows: Vec<UnitRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let pairs: Vec<(u64, f64)> = rows.iter().map(|r| (r.count, r.seconds)).collect();
    let rate_hz = unit_frame_rate(&pairs)?;
    write_json(
        &FrameRateOutput {
            rate_hz,
            utterances: rows.len(),
            units: rows.iter().map(|r| r.count).sum(),
            seconds: rows.iter().map(|r| r.seconds).sum(),
        },
        out,
    )
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config } => run_synth(&config),
        Command::Train { config } => run_train(&config),
        Command::Eval { config } => run_eval(&config),
        Command::Segment { config } => run_segment(&config),
        Command::Subsample {
            input,
            method,
            stride,
            out,
        } => run_subsample(&input, method, stride, &out),
        Command::Macs {
            model,
            len,
            strides,
            period_ms,
            out,
        } => run_macs(&model, len, &strides, period_ms, &out),
        Command::Framerate { input, out } => run_framerate(&input, &out),
    }
}

/// Process exit code for a failed run: 2 for numerical failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}
