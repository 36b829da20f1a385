use serde::Serialize;

use crate::error::{Error, Result};

use super::SignalSample;

/// Summary of the step-count labels of a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelStats {
    pub n: usize,
    pub min: u32,
    pub max: u32,
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single sample.
    pub std: f64,
    /// Biased Fisher-Pearson skew `m3 / m2^1.5`; 0 for zero variance.
    pub skew: f64,
}

pub fn label_stats<'a, I>(samples: I) -> Result<LabelStats>
where
    I: IntoIterator<Item = &'a SignalSample>,
{
    let labels: Vec<u32> = samples.into_iter().map(|s| s.step_count).collect();
    stats_of(&labels)
}

pub(crate) fn stats_of(labels: &[u32]) -> Result<LabelStats> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "label statistics of an empty set".into(),
        ));
    }
    let n = labels.len() as f64;
    let min = *labels.iter().min().unwrap();
    let max = *labels.iter().max().unwrap();
    let mean = labels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &v in labels {
        let d = v as f64 - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    let std = if labels.len() > 1 {
        (m2 / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let (m2, m3) = (m2 / n, m3 / n);
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    Ok(LabelStats {
        n: labels.len(),
        min,
        max,
        mean,
        std,
        skew,
    })
}

/// Published label statistics for one dataset (or subset).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceStats {
    pub name: &'static str,
    pub min: u32,
    pub max: u32,
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
}

/// Label statistics of the public step-counting datasets.
pub const TABLE_ONE: [ReferenceStats; 4] = [
    ReferenceStats {
        name: "wdsc",
        min: 63,
        max: 106,
        mean: 78.0,
        std: 8.46,
        skew: 0.56,
    },
    ReferenceStats {
        name: "weallwalk",
        min: 2,
        max: 136,
        mean: 40.71,
        std: 33.29,
        skew: 0.81,
    },
    ReferenceStats {
        name: "pedometer-regular",
        min: 857,
        max: 1100,
        mean: 991.03,
        std: 54.03,
        skew: -0.27,
    },
    ReferenceStats {
        name: "pedometer-semi-regular",
        min: 548,
        max: 814,
        mean: 704.03,
        std: 65.57,
        skew: -0.21,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsCheck {
    pub reference: &'static str,
    pub observed: LabelStats,
    pub min_ok: bool,
    pub max_ok: bool,
    pub mean_rel_err: f64,
    pub std_rel_err: f64,
    pub skew_rel_err: f64,
    pub passed: bool,
}

/// Compares observed stats to a reference: min/max exact, mean/std/skew within `rel_tol`.
pub fn check_against(observed: LabelStats, reference: &ReferenceStats, rel_tol: f64) -> StatsCheck {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let min_ok = observed.min == reference.min;
    let max_ok = observed.max == reference.max;
    let mean_rel_err = rel(observed.mean, reference.mean);
    let std_rel_err = rel(observed.std, reference.std);
    let skew_rel_err = rel(observed.skew, reference.skew);
    let passed = min_ok
        && max_ok
        && mean_rel_err <= rel_tol
        && std_rel_err <= rel_tol
        && skew_rel_err <= rel_tol;
    StatsCheck {
        reference: reference.name,
        observed,
        min_ok,
        max_ok,
        mean_rel_err,
        std_rel_err,
        skew_rel_err,
        passed,
    }
}
