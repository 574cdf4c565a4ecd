//! Penalized re-segmentation of a frame-by-code distance matrix.
//!
//! The objective over segmentations is
//! `sum_segments (min_c sum_{t in seg} dist[t, c] + lambda)`, minimized
//! exactly by a dynamic program over cut positions.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::argmin;
use crate::error::{Error, Result};
use crate::par;
use crate::seqcore::Segmentation;

/// Relative tolerance of a frame-rate match in [`lambda_sweep`].
pub const RATE_TOLERANCE: f64 = 0.05;
pub const SWEEP_MAX_ITERS: usize = 30;

/// Costs closer than this (relative) are ties, resolved by segment count and
/// then by cut positions.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Penalty per segment.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpResult {
    /// Per-frame code after smoothing.
    pub codes: Vec<usize>,
    pub segmentation: Segmentation,
    pub objective: f64,
}

fn validate(dist: &Array2<f64>) -> Result<()> {
    if dist.nrows() == 0 || dist.ncols() == 0 {
        return Err(Error::EmptySequence);
    }
    if let Some(v) = dist.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("distance {v} is not a finite nonnegative number")));
    }
    Ok(())
}

fn segment_best(dist: &Array2<f64>, start: usize, end: usize) -> (usize, f64) {
    let mut sums = vec![0.0; dist.ncols()];
    for t in start..end {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += dist[[t, c]];
        }
    }
    argmin(sums)
}

/// Objective of a given segmentation, folded over segments in order. This is
/// the canonical evaluation used for reported objective values.
pub fn segmentation_cost(dist: &Array2<f64>, boundaries: &[usize], lambda: f64) -> f64 {
    let mut total = 0.0;
    let mut start = 0;
    for &end in boundaries {
        total += segment_best(dist, start, end).1 + lambda;
        start = end;
    }
    total
}

pub(crate) fn costs_tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_EPS * a.abs().max(b.abs()).max(1.0)
}

#[derive(Clone, Copy)]
struct Cell {
    cost: f64,
    segments: usize,
    back: usize,
}

fn cuts(cells: &[Option<Cell>], mut end: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while end > 0 {
        out.push(end);
        end = cells[end].expect("reachable prefix").back;
    }
    out.reverse();
    out
}

/// Exact minimizer; ties prefer fewer segments, then earlier cuts.
pub fn dp_smooth(dist: &Array2<f64>, cfg: &DpConfig) -> Result<DpResult> {
    validate(dist)?;
    if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {}", cfg.lambda)));
    }
    let (t_len, n_codes) = dist.dim();
    let mut cells: Vec<Option<Cell>> = vec![None; t_len + 1];
    cells[0] = Some(Cell {
        cost: 0.0,
        segments: 0,
        back: 0,
    });
    let mut sums = vec![0.0; n_codes];
    for start in 0..t_len {
        let base = cells[start].expect("every prefix is reachable");
        sums.iter_mut().for_each(|s| *s = 0.0);
        for end in start + 1..=t_len {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += dist[[end - 1, c]];
            }
            let seg_cost = argmin(sums.iter().copied()).1;
            let cand = Cell {
                cost: base.cost + (seg_cost + cfg.lambda),
                segments: base.segments + 1,
                back: start,
            };
            let better = match &cells[end] {
                None => true,
                Some(cur) => {
                    if !costs_tie(cand.cost, cur.cost) {
                        cand.cost < cur.cost
                    } else {
                        match cand.segments.cmp(&cur.segments) {
                            Ordering::Less => true,
                            Ordering::Greater => false,
                            Ordering::Equal => cuts(&cells, start) < cuts(&cells, cur.back),
                        }
                    }
                }
            };
            if better {
                cells[end] = Some(cand);
            }
        }
    }
    let boundaries = cuts(&cells, t_len);
    let mut codes = Vec::with_capacity(t_len);
    let mut labels = Vec::with_capacity(boundaries.len());
    let mut start = 0;
    for &end in &boundaries {
        let (code, _) = segment_best(dist, start, end);
        codes.extend(std::iter::repeat_n(code, end - start));
        labels.push(code as i64);
        start = end;
    }
    let objective = segmentation_cost(dist, &boundaries, cfg.lambda);
    Ok(DpResult {
        codes,
        segmentation: Segmentation::new(boundaries, Some(labels), t_len)?,
        objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub lambda: f64,
    /// Achieved average segment rate (Hz) at `lambda`.
    pub rate_hz: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Bisection on `lambda` until the corpus-level segment rate is within
/// [`RATE_TOLERANCE`] of `target_rate_hz`, or [`SWEEP_MAX_ITERS`] steps. The
/// closest `lambda` seen is returned. Utterances are smoothed in parallel.
pub fn lambda_sweep(dists: &[Array2<f64>], target_rate_hz: f64, frame_period_ms: f64) -> Result<SweepResult> {
    if dists.is_empty() {
        return Err(Error::EmptySequence);
    }
    for d in dists {
        validate(d)?;
    }
    let input_rate = 1000.0 / frame_period_ms;
    if !(target_rate_hz > 0.0 && target_rate_hz <= input_rate) {
        return Err(Error::UnreachableRate(format!(
            "target {target_rate_hz} Hz outside (0, {input_rate}] Hz"
        )));
    }
    let seconds = dists.iter().map(|d| d.nrows()).sum::<usize>() as f64 * frame_period_ms / 1000.0;
    let count_at = |lambda: f64| -> Result<usize> {
        let cfg = DpConfig { lambda };
        par::map(dists, |d| dp_smooth(d, &cfg).map(|r| r.segmentation.num_segments()))
            .into_iter()
            .sum()
    };
    let mut evaluated: Vec<(f64, usize)> = Vec::new();
    let mut record = |lambda: f64, count: usize| -> Result<()> {
        evaluated.push((lambda, count));
        let mut sorted = evaluated.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(Error::Numerical("segment count increased with lambda".into()));
        }
        Ok(())
    };
    let within = |rate: f64| (rate - target_rate_hz).abs() <= RATE_TOLERANCE * target_rate_hz;

    let hi_lambda = dists.iter().map(|d| d.sum()).sum::<f64>() + 1.0;
    let max_count = count_at(0.0)?;
    record(0.0, max_count)?;
    let min_count = count_at(hi_lambda)?;
    record(hi_lambda, min_count)?;
    let max_rate = max_count as f64 / seconds;
    let min_rate = min_count as f64 / seconds;
    if target_rate_hz > max_rate * (1.0 + RATE_TOLERANCE) || target_rate_hz < min_rate * (1.0 - RATE_TOLERANCE) {
        return Err(Error::UnreachableRate(format!(
            "target {target_rate_hz} Hz outside achievable [{min_rate}, {max_rate}] Hz"
        )));
    }
    let mut best = (0.0, max_rate);
    for (lambda, rate) in [(0.0, max_rate), (hi_lambda, min_rate)] {
        if (rate - target_rate_hz).abs() < (best.1 - target_rate_hz).abs() {
            best = (lambda, rate);
        }
        if within(rate) {
            return Ok(SweepResult { lambda, rate_hz: rate, iterations: 0, converged: true });
        }
    }
    let (mut lo, mut hi) = (0.0, hi_lambda);
    for iter in 1..=SWEEP_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let count = count_at(mid)?;
        record(mid, count)?;
        let rate = count as f64 / seconds;
        if (rate - target_rate_hz).abs() < (best.1 - target_rate_hz).abs() {
            best = (mid, rate);
        }
        if within(rate) {
            return Ok(SweepResult { lambda: mid, rate_hz: rate, iterations: iter, converged: true });
        }
        if rate > target_rate_hz {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SweepResult {
        lambda: best.0,
        rate_hz: best.1,
        iterations: SWEEP_MAX_ITERS,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenters::merge_contiguous;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((t, c), |_| rng.random_range(0.0..1.0))
    }

    /// Exhaustive search over all 2^(T-1) cut sets.
    fn brute_force(dist: &Array2<f64>, lambda: f64) -> (Vec<usize>, f64) {
        let t = dist.nrows();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for mask in 0u32..(1 << (t - 1)) {
            let mut b: Vec<usize> = (1..t).filter(|i| mask & (1 << (i - 1)) != 0).collect();
            b.push(t);
            let cost = segmentation_cost(dist, &b, lambda);
            let replace = match &best {
                None => true,
                Some((bb, bc)) => {
                    if !costs_tie(cost, *bc) {
                        cost < *bc
                    } else {
                        (b.len(), &b) < (bb.len(), bb)
                    }
                }
            };
            if replace {
                best = Some((b, cost));
            }
        }
        best.unwrap()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let t = rng.random_range(1..=9);
            let c = rng.random_range(1..=3);
            let d = random_dist(t, c, &mut rng);
            let lambda = rng.random_range(0.0..1.5);
            let got = dp_smooth(&d, &DpConfig { lambda }).unwrap();
            let (b, cost) = brute_force(&d, lambda);
            assert_eq!(got.segmentation.boundaries(), &b[..]);
            assert_eq!(got.objective, cost);
        }
    }

    #[test]
    fn zero_lambda_merges_argmin_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = random_dist(30, 3, &mut rng);
            let codes: Vec<i64> = d.outer_iter().map(|r| argmin(r.iter().copied()).0 as i64).collect();
            let got = dp_smooth(&d, &DpConfig { lambda: 0.0 }).unwrap();
            assert_eq!(got.segmentation, merge_contiguous(&codes).unwrap());
        }
    }

    #[test]
    fn huge_lambda_single_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dist(25, 4, &mut rng);
        let got = dp_smooth(&d, &DpConfig { lambda: d.sum() }).unwrap();
        assert_eq!(got.segmentation.boundaries(), &[25]);
        let best = argmin((0..4).map(|c| d.column(c).sum())).0;
        assert!(got.codes.iter().all(|&c| c == best));
    }

    #[test]
    fn errors() {
        assert!(dp_smooth(&Array2::zeros((0, 2)), &DpConfig { lambda: 1.0 }).is_err());
        assert!(dp_smooth(&Array2::from_elem((2, 2), -1.0), &DpConfig { lambda: 1.0 }).is_err());
    }

    #[test]
    fn sweep_reaches_half_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dists: Vec<_> = (0..4).map(|_| random_dist(80, 3, &mut rng)).collect();
        let max_rate = dists
            .iter()
            .map(|d| dp_smooth(d, &DpConfig { lambda: 0.0 }).unwrap().segmentation.num_segments())
            .sum::<usize>() as f64
            / (320.0 * 0.02);
        let r = lambda_sweep(&dists, 0.5 * max_rate, 20.0).unwrap();
        assert!(r.converged && r.iterations <= SWEEP_MAX_ITERS);
        assert!((r.rate_hz - 0.5 * max_rate).abs() <= 0.05 * 0.5 * max_rate);
        assert_eq!(lambda_sweep(&dists, 0.5 * max_rate, 20.0).unwrap(), r);
        assert!(lambda_sweep(&dists, 60.0, 20.0).is_err());
        assert!(lambda_sweep(&dists, 0.01, 20.0).is_err());
    }

    #[test]
    fn sweep_at_max_rate_is_zero_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dists = vec![random_dist(50, 2, &mut rng)];
        let k = dp_smooth(&dists[0], &DpConfig { lambda: 0.0 }).unwrap().segmentation.num_segments();
        let r = lambda_sweep(&dists, k as f64 / 1.0, 20.0).unwrap();
        assert_eq!(r.lambda, 0.0);
    }
}
