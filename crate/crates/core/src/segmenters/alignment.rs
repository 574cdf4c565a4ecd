//! Ingestion of time-aligned unit transcripts (`start_ms,end_ms,label`).

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seqcore::Segmentation;

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Labels are indices into `label_names`, in order of first appearance.
    pub segmentation: Segmentation,
    pub label_names: Vec<String>,
}

/// Frame index of an end time, rounding half up.
fn to_frame(ms: f64, frame_period_ms: f64) -> usize {
    (ms / frame_period_ms + 0.5).floor().max(0.0) as usize
}

/// Parses alignment rows. Consecutive rows may leave a gap or overlap of at
/// most one frame period. With `total_len`, the final boundary is clamped to
/// it.
pub fn parse_alignment<R: Read>(reader: R, frame_period_ms: f64, total_len: Option<usize>) -> Result<Alignment> {
    if !(frame_period_ms.is_finite() && frame_period_ms > 0.0) {
        return Err(Error::InvalidArgument(format!("frame period {frame_period_ms}")));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut boundaries: Vec<usize> = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, i64> = HashMap::new();
    let mut prev: Option<(f64, f64)> = None;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let err = |reason: String| Error::Alignment { row, reason };
        if record.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", record.len())));
        }
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad time {:?}", &record[i])))
        };
        let (start, end) = (parse(0)?, parse(1)?);
        if end <= start {
            return Err(err(format!("end {end} not after start {start}")));
        }
        let prev_end = match prev {
            Some((prev_start, prev_end)) => {
                if start < prev_start {
                    return Err(err("rows are not sorted by start time".into()));
                }
                prev_end
            }
            None => 0.0,
        };
        if start - prev_end > frame_period_ms {
            return Err(err(format!("gap of {} ms", start - prev_end)));
        }
        if prev_end - start > frame_period_ms {
            return Err(err(format!("overlap of {} ms", prev_end - start)));
        }
        let b = to_frame(end, frame_period_ms);
        if boundaries.last().is_some_and(|&last| b <= last) || b == 0 {
            return Err(err(format!("segment ending at {end} ms is shorter than half a frame")));
        }
        let label = record[2].to_string();
        let code = *index.entry(label.clone()).or_insert_with(|| {
            names.push(label);
            names.len() as i64 - 1
        });
        boundaries.push(b);
        labels.push(code);
        prev = Some((start, end));
    }
    if boundaries.is_empty() {
        return Err(Error::Alignment {
            row: 0,
            reason: "no rows".into(),
        });
    }
    let t_len = match total_len {
        Some(t) => {
            let n = boundaries.len();
            if n >= 2 && boundaries[n - 2] >= t {
                return Err(Error::Alignment {
                    row: n - 2,
                    reason: format!("boundary {} beyond {t} frames", boundaries[n - 2]),
                });
            }
            boundaries[n - 1] = t;
            t
        }
        None => *boundaries.last().unwrap(),
    };
    Ok(Alignment {
        segmentation: Segmentation::new(boundaries, Some(labels), t_len)?,
        label_names: names,
    })
}

pub fn read_alignment(path: impl AsRef<Path>, frame_period_ms: f64, total_len: Option<usize>) -> Result<Alignment> {
    parse_alignment(File::open(path)?, frame_period_ms, total_len)
}
