//! Piecewise-constant synthetic utterances with known boundaries.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{FrameSequence, Segmentation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_utterances: usize,
    /// Inclusive range of utterance lengths in frames.
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    /// Mean of the geometric segment-length distribution, in frames.
    pub mean_segment_len: f64,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub frame_period_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_utterances: 64,
            min_len: 80,
            max_len: 120,
            dim: 16,
            mean_segment_len: 5.0,
            latent_dim: 8,
            noise_std: 0.1,
            frame_period_ms: 20.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_utterances == 0 {
            return bad("n_utterances must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("length range must satisfy 1 <= min_len <= max_len");
        }
        if self.dim == 0 || self.latent_dim == 0 {
            return bad("dimensions must be positive");
        }
        if !(self.mean_segment_len >= 1.0 && self.mean_segment_len.is_finite()) {
            return bad("mean segment length must be at least 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise std must be non-negative");
        }
        if !(self.frame_period_ms > 0.0 && self.frame_period_ms.is_finite()) {
            return bad("frame period must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: FrameSequence,
    pub segmentation: Segmentation,
}

/// Samples segment lengths `1 + Geometric(1 / L)` until the utterance is
/// filled (the last one truncated), draws one latent per segment, maps it
/// through a fixed random projection and adds Gaussian noise per frame.
pub fn synth_data(cfg: &SynthConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let proj_scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let projection = Array2::from_shape_fn((cfg.latent_dim, cfg.dim), |_| std_normal.sample(&mut rng) * proj_scale);
    let lengths = Geometric::new(1.0 / cfg.mean_segment_len).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    (0..cfg.n_utterances)
        .map(|_| {
            let t_len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut seg_lens = Vec::new();
            let mut filled = 0;
            while filled < t_len {
                let len = (1 + lengths.sample(&mut rng) as usize).min(t_len - filled);
                seg_lens.push(len);
                filled += len;
            }
            let mut data = Array2::zeros((t_len, cfg.dim));
            let mut t = 0;
            for &len in &seg_lens {
                let z = ndarray::Array1::from_shape_fn(cfg.latent_dim, |_| std_normal.sample(&mut rng));
                let v = z.dot(&projection);
                for _ in 0..len {
                    let mut row = data.row_mut(t);
                    row.assign(&v);
                    if cfg.noise_std > 0.0 {
                        row.mapv_inplace(|x| x + cfg.noise_std * std_normal.sample(&mut rng));
                    }
                    t += 1;
                }
            }
            Ok(Utterance {
                features: FrameSequence::new(data, cfg.frame_period_ms)?,
                segmentation: Segmentation::from_lengths(&seg_lens, None)?,
            })
        })
        .collect()
}

/// Pooled ground-truth segment rate in Hz.
pub fn segment_rate_hz(data: &[Utterance]) -> f64 {
    let segments: usize = data.iter().map(|u| u.segmentation.num_segments()).sum();
    let duration_ms: f64 = data
        .iter()
        .map(|u| u.features.len() as f64 * u.features.frame_period_ms())
        .sum();
    segments as f64 * 1000.0 / duration_ms
}
