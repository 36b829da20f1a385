//! Per-timestep attention export.
//!
//! CSV layout: header `t,<channel names...>,score,weight`, one row per input
//! timestep. `t` is in seconds from the start of the preprocessed series,
//! `score` is the energy-summation dot product and `weight` its softmax.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::numkern::Matrix;
use crate::pipeline::TimeSeries;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub t: Vec<f64>,
    pub channel_names: Vec<String>,
    /// `L x C` model input.
    pub inputs: Matrix,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Strict rises followed by a non-rise in the weight column.
    pub fn weight_local_maxima(&self) -> usize {
        count_local_maxima(&self.weights)
    }
}

/// Number of indices `i` with `v[i-1] < v[i] >= v[i+1]`.
pub fn count_local_maxima(v: &[f64]) -> usize {
    (1..v.len().saturating_sub(1))
        .filter(|&i| v[i] > v[i - 1] && v[i] >= v[i + 1])
        .count()
}

/// Runs the attention model on a preprocessed series.
pub fn attention_trace(
    params: &ModelParams,
    config: &ModelConfig,
    series: &TimeSeries,
) -> Result<AttentionTrace> {
    if !config.use_attention {
        return Err(Error::InvalidArgument(
            "model has no attention layer".into(),
        ));
    }
    let pred = model_forward(params, config, &series.channels)?;
    let att = pred.attention.expect("attention model");
    Ok(AttentionTrace {
        t: (0..series.len()).map(|i| i as f64 / series.fs_hz).collect(),
        channel_names: series.channel_names.clone(),
        inputs: series.channels.clone(),
        scores: att.scores,
        weights: att.weights,
    })
}

pub fn write_attention_csv(path: &Path, trace: &AttentionTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend(trace.channel_names.iter().cloned());
    header.extend(["score".to_string(), "weight".to_string()]);
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for i in 0..trace.len() {
        let mut row = vec![trace.t[i].to_string()];
        row.extend(trace.inputs.row(i).iter().map(f64::to_string));
        row.push(trace.scores[i].to_string());
        row.push(trace.weights[i].to_string());
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_attention_csv(path: &Path) -> Result<AttentionTrace> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let n = header.len();
    if n < 4 || header[0] != "t" || header[n - 2] != "score" || header[n - 1] != "weight" {
        return Err(Error::InvalidArgument(format!(
            "{}: expected header t,<channels>,score,weight",
            path.display()
        )));
    }
    let channels = n - 3;
    let (mut t, mut inputs, mut scores, mut weights) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                Error::InvalidArgument(format!("{} line {}: {e}", path.display(), line + 2))
            })?;
        if vals.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} line {}: wrong field count",
                path.display(),
                line + 2
            )));
        }
        t.push(vals[0]);
        inputs.extend_from_slice(&vals[1..1 + channels]);
        scores.push(vals[n - 2]);
        weights.push(vals[n - 1]);
    }
    Ok(AttentionTrace {
        inputs: Matrix::from_vec(t.len(), channels, inputs)?,
        t,
        channel_names: header[1..1 + channels].to_vec(),
        scores,
        weights,
    })
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
