//! Multiply-accumulate accounting and frame-rate statistics.
//!
//! MACs follow the inference convention: convolutions, linear maps and
//! attention matrix products are counted; nonlinearities, softmax, bias
//! additions, pooling, prediction heads and upsampling are not.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        /// Stride-1 convolutions with same padding keep the length.
        #[serde(default)]
        same_padding: bool,
    },
    Linear {
        d_in: usize,
        d_out: usize,
    },
    SelfAttention {
        d_model: usize,
    },
    /// Parameter-free pooling by `stride`; output length `ceil(T / stride)`.
    Subsample {
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub frontend: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, frontend: false }
    }

    pub fn frontend(kind: LayerKind) -> Self {
        Self { kind, frontend: true }
    }

    fn validate(&self) -> Result<()> {
        let dims: &[usize] = match &self.kind {
            LayerKind::Conv1d { c_in, c_out, kernel, stride, .. } => &[*c_in, *c_out, *kernel, *stride],
            LayerKind::Linear { d_in, d_out } => &[*d_in, *d_out],
            LayerKind::SelfAttention { d_model } => &[*d_model],
            LayerKind::Subsample { stride } => &[*stride],
        };
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("non-positive dimension in {:?}", self.kind)));
        }
        Ok(())
    }

    /// Output length and MACs for an input of `len` frames.
    pub fn cost(&self, len: usize) -> Result<(usize, u64)> {
        self.validate()?;
        let t = len as u64;
        Ok(match self.kind {
            LayerKind::Conv1d { c_in, c_out, kernel, stride, same_padding } => {
                let out = if same_padding && stride == 1 {
                    len
                } else if len >= kernel {
                    (len - kernel) / stride + 1
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "length {len} is shorter than kernel {kernel}"
                    )));
                };
                (out, out as u64 * (c_out * c_in * kernel) as u64)
            }
            LayerKind::Linear { d_in, d_out } => (len, t * (d_in * d_out) as u64),
            LayerKind::SelfAttention { d_model } => {
                let d = d_model as u64;
                (len, 4 * t * d * d + 2 * t * t * d)
            }
            LayerKind::Subsample { stride } => (len.div_ceil(stride), 0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub input_len: usize,
    pub output_len: usize,
    pub macs: u64,
    pub frontend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacsReport {
    pub per_layer: Vec<LayerMacs>,
    pub total: u64,
    /// Total without front-end layers.
    pub total_excluding_frontend: u64,
    pub input_len: usize,
}

pub fn macs_estimate(layers: &[LayerSpec], input_len: usize) -> Result<MacsReport> {
    if input_len == 0 {
        return Err(Error::InvalidArgument("input length must be positive".into()));
    }
    let mut len = input_len;
    let mut per_layer = Vec::with_capacity(layers.len());
    for layer in layers {
        let (out, macs) = layer.cost(len)?;
        if out == 0 {
            return Err(Error::InvalidArgument("propagated length reached zero".into()));
        }
        per_layer.push(LayerMacs {
            input_len: len,
            output_len: out,
            macs,
            frontend: layer.frontend,
        });
        len = out;
    }
    let total = per_layer.iter().map(|l| l.macs).sum();
    let total_excluding_frontend = per_layer.iter().filter(|l| !l.frontend).map(|l| l.macs).sum();
    Ok(MacsReport {
        per_layer,
        total,
        total_excluding_frontend,
        input_len,
    })
}

/// Sets every subsample layer of `model` to `stride`, inserting one after
/// the last front-end layer when the model has none.
pub fn with_subsampling(model: &[LayerSpec], stride: usize) -> Vec<LayerSpec> {
    let mut layers = model.to_vec();
    let mut found = false;
    for l in &mut layers {
        if let LayerKind::Subsample { stride: s } = &mut l.kind {
            *s = stride;
            found = true;
        }
    }
    if !found {
        let at = layers.iter().rposition(|l| l.frontend).map_or(0, |i| i + 1);
        layers.insert(at, LayerSpec::new(LayerKind::Subsample { stride }));
    }
    layers
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacsRow {
    pub stride: usize,
    pub frame_period_ms: f64,
    pub frame_rate_hz: f64,
    pub macs: u64,
    pub macs_c: u64,
}

/// One row per stride. `frame_period_ms` is the period at the subsampling
/// point before subsampling.
pub fn macs_vs_frame_rate(
    model: &[LayerSpec],
    strides: &[usize],
    input_len: usize,
    frame_period_ms: f64,
) -> Result<Vec<MacsRow>> {
    strides
        .iter()
        .map(|&stride| {
            if stride == 0 {
                return Err(Error::InvalidArgument("stride must be positive".into()));
            }
            let report = macs_estimate(&with_subsampling(model, stride), input_len)?;
            let period = frame_period_ms * stride as f64;
            Ok(MacsRow {
                stride,
                frame_period_ms: period,
                frame_rate_hz: 1000.0 / period,
                macs: report.total,
                macs_c: report.total_excluding_frontend,
            })
        })
        .collect()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn write_macs_csv<W: Write>(rows: &[MacsRow], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pooled rate: total units over total seconds.
pub fn unit_frame_rate(utterances: &[(u64, f64)]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut units = 0u64;
    let mut seconds = 0.0;
    for &(count, dur) in utterances {
        if !(dur.is_finite() && dur > 0.0) {
            return Err(Error::InvalidArgument(format!("duration {dur} s")));
        }
        units += count;
        seconds += dur;
    }
    Ok(units as f64 / seconds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(d_in: usize, d_out: usize) -> LayerSpec {
        LayerSpec::new(LayerKind::Linear { d_in, d_out })
    }

    #[test]
    fn hand_computed_layers() {
        assert_eq!(macs_estimate(&[linear(4, 8)], 10).unwrap().total, 320);
        let conv = LayerSpec::new(LayerKind::Conv1d { c_in: 2, c_out: 3, kernel: 5, stride: 1, same_padding: true });
        assert_eq!(macs_estimate(&[conv], 10).unwrap().total, 300);
        let attn = LayerSpec::new(LayerKind::SelfAttention { d_model: 8 });
        assert_eq!(macs_estimate(&[attn], 10).unwrap().total, 4160);
    }

    #[test]
    fn valid_conv_length() {
        let conv = LayerSpec::frontend(LayerKind::Conv1d { c_in: 1, c_out: 2, kernel: 10, stride: 5, same_padding: false });
        let r = macs_estimate(&[conv, linear(2, 2)], 100).unwrap();
        assert_eq!(r.per_layer[0].output_len, 19);
        assert_eq!(r.total, 19 * 20 + 19 * 4);
        assert_eq!(r.total_excluding_frontend, 19 * 4);
        assert!(macs_estimate(&[conv], 5).is_err());
        assert!(macs_estimate(&[linear(0, 2)], 5).is_err());
    }

    #[test]
    fn stride_rows() {
        let rows = macs_vs_frame_rate(&[linear(4, 4), linear(4, 4)], &[1, 2], 100, 20.0).unwrap();
        assert_eq!(rows[0].macs_c, 2 * rows[1].macs_c);
        assert_eq!(rows[1].frame_period_ms, 40.0);
        let front = LayerSpec::frontend(LayerKind::Linear { d_in: 3, d_out: 3 });
        for r in macs_vs_frame_rate(&[front], &[1, 2, 4], 64, 20.0).unwrap() {
            assert_eq!(r.macs_c, 0);
        }
        let mut buf = Vec::new();
        write_macs_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "stride,frame_period_ms,frame_rate_hz,macs,macs_c");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn attention_gains_more_than_linear() {
        let attn = [LayerSpec::new(LayerKind::SelfAttention { d_model: 8 })];
        let rows = macs_vs_frame_rate(&attn, &[1, 2], 1000, 20.0).unwrap();
        assert!(rows[0].macs_c as f64 / rows[1].macs_c as f64 > 2.0);
    }

    #[test]
    fn subsample_insertion_point() {
        let front = LayerSpec::frontend(LayerKind::Linear { d_in: 3, d_out: 3 });
        let layers = with_subsampling(&[front, linear(3, 3)], 4);
        assert_eq!(layers[1].kind, LayerKind::Subsample { stride: 4 });
        let again = with_subsampling(&layers, 2);
        assert_eq!(again.len(), 3);
        assert_eq!(again[1].kind, LayerKind::Subsample { stride: 2 });
    }

    #[test]
    fn layer_json() {
        let l: Vec<LayerSpec> = serde_json::from_str(
            r#"[{"kind":"conv1d","c_in":1,"c_out":4,"kernel":3,"stride":1,"same_padding":true,"frontend":true},
                {"kind":"linear","d_in":4,"d_out":4},{"kind":"self_attention","d_model":4}]"#,
        )
        .unwrap();
        assert!(l[0].frontend && !l[1].frontend);
        assert_eq!(l[2].kind, LayerKind::SelfAttention { d_model: 4 });
    }

    #[test]
    fn unit_rates() {
        assert_eq!(unit_frame_rate(&[(10, 1.0)]).unwrap(), 10.0);
        // 100 ms phones
        assert!((unit_frame_rate(&[(25, 2.5)]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(unit_frame_rate(&[(5, 0.5), (15, 1.5)]).unwrap(), 10.0);
        assert!(unit_frame_rate(&[(5, 0.0)]).is_err());
    }
}
