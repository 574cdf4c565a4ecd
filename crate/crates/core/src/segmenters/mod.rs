//! Segmentation providers: cluster codes, run merging, penalized dynamic
//! programming, silence overwrite and alignment ingestion.

mod alignment;
mod dp;
mod kmeans;

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::seqcore::{FrameSequence, Segmentation};

pub use alignment::{parse_alignment, read_alignment, Alignment};
pub use dp::{dp_smooth, lambda_sweep, segmentation_cost, DpConfig, DpResult, SweepResult, RATE_TOLERANCE, SWEEP_MAX_ITERS};
pub use kmeans::{kmeans_fit, Codebook};

/// Label given to segments produced by [`overwrite_silence`].
pub const SILENCE_LABEL: i64 = -1;

/// `T x C` squared Euclidean distances from each frame to each centroid.
pub fn code_distances(x: &FrameSequence, cb: &Codebook) -> Result<Array2<f64>> {
    if x.dim() != cb.dim() {
        return Err(Error::ShapeMismatch(format!(
            "frames of dim {} against centroids of dim {}",
            x.dim(),
            cb.dim()
        )));
    }
    let c = cb.centroids();
    let mut out = Array2::zeros((x.len(), c.nrows()));
    for (t, frame) in x.data().outer_iter().enumerate() {
        for (k, centroid) in c.outer_iter().enumerate() {
            out[[t, k]] = frame
                .iter()
                .zip(centroid.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    Ok(out)
}

/// Index of the smallest entry; the lowest index wins ties.
pub(crate) fn argmin(row: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Nearest centroid per frame.
pub fn assign_codes(x: &FrameSequence, cb: &Codebook) -> Result<Vec<usize>> {
    let dist = code_distances(x, cb)?;
    Ok(dist.outer_iter().map(|r| argmin(r.iter().copied()).0).collect())
}

/// One segment per maximal run of equal codes, labeled with the code.
pub fn merge_contiguous(codes: &[i64]) -> Result<Segmentation> {
    if codes.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut boundaries = Vec::new();
    let mut labels = Vec::new();
    for (t, w) in codes.windows(2).enumerate() {
        if w[0] != w[1] {
            boundaries.push(t + 1);
            labels.push(w[0]);
        }
    }
    boundaries.push(codes.len());
    labels.push(*codes.last().unwrap());
    Segmentation::new(boundaries, Some(labels), codes.len())
}

/// Splits `seg` so that every maximal silent run is its own segment labeled
/// [`SILENCE_LABEL`]. Unlabeled inputs label the remaining pieces by the
/// index of the segment they came from.
pub fn overwrite_silence(seg: &Segmentation, silence: &[bool]) -> Result<Segmentation> {
    let t_len = seg.total_len();
    if silence.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "silence mask of {} frames for {t_len} frames",
            silence.len()
        )));
    }
    if !seg.is_complete() {
        return Err(Error::InvalidSegmentation("segmentation must end at T".into()));
    }
    if !silence.iter().any(|&s| s) {
        return Ok(seg.clone());
    }
    // piece id: (silent, original segment index or silent run start)
    let mut pieces: Vec<(bool, usize)> = Vec::with_capacity(t_len);
    for (k, (s, e)) in seg.ranges().enumerate() {
        for t in s..e {
            if silence[t] {
                let run_start = match pieces.last() {
                    Some(&(true, start)) if t > 0 && silence[t - 1] => start,
                    _ => t,
                };
                pieces.push((true, run_start));
            } else {
                pieces.push((false, k));
            }
        }
    }
    let label_of = |p: (bool, usize)| -> i64 {
        match p {
            (true, _) => SILENCE_LABEL,
            (false, k) => seg.labels().map_or(k as i64, |l| l[k]),
        }
    };
    let mut boundaries = Vec::new();
    let mut labels = Vec::new();
    for t in 0..t_len {
        if t + 1 == t_len || pieces[t] != pieces[t + 1] {
            boundaries.push(t + 1);
            labels.push(label_of(pieces[t]));
        }
    }
    Segmentation::new(boundaries, Some(labels), t_len)
}

/// Parses a one-character-per-frame `0`/`1` silence line.
pub fn parse_silence_mask(text: &str) -> Result<Vec<bool>> {
    text.trim()
        .chars()
        .enumerate()
        .map(|(i, c)| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::InvalidArgument(format!(
                "silence mask character {other:?} at frame {i}"
            ))),
        })
        .collect()
}

pub fn read_silence_mask(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    parse_silence_mask(&fs::read_to_string(path)?)
}
