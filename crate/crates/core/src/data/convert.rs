//! Conversion of a staged public dataset into the canonical layout.
//!
//! The native archives of the public step-counting datasets differ widely, so
//! conversion starts from a staging directory with a flat index:
//!
//! ```text
//! <source>/index.csv
//!     id,subject,file,fs_hz,step_count[,placement,population,regularity,walk_start_s,walk_end_s]
//! <source>/<file>
//!     CSV with a header containing ax,ay,az (optionally t, extra columns ignored)
//! ```
//!
//! When `walk_start_s`/`walk_end_s` are present the recording is cropped to
//! that interval (inclusive), using the `t` column when present and `row/fs`
//! otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numkern::Matrix;

use super::stats::{check_against, label_stats, StatsCheck, TABLE_ONE};
use super::store::{save_dataset, Manifest};
use super::{Population, Regularity, SampleMeta, SignalSample};

pub const EXPECTED_LAYOUT: &str = "index.csv (columns id,subject,file,fs_hz,step_count[,placement,population,regularity,walk_start_s,walk_end_s]) and the recording CSVs it lists (columns ax,ay,az[,t])";

#[derive(Debug, Deserialize)]
struct IndexRow {
    id: String,
    subject: String,
    file: String,
    fs_hz: f64,
    step_count: u32,
    #[serde(default)]
    placement: Option<String>,
    #[serde(default)]
    population: Option<String>,
    #[serde(default)]
    regularity: Option<String>,
    #[serde(default)]
    walk_start_s: Option<f64>,
    #[serde(default)]
    walk_end_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvertOutcome {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    /// Label statistics compared to the published values, for known datasets.
    pub checks: Vec<StatsCheck>,
}

fn unsupported(dir: &Path) -> Error {
    Error::UnsupportedLayout {
        dir: dir.to_path_buf(),
        expected: EXPECTED_LAYOUT.into(),
    }
}

fn read_recording(path: &Path, row: &IndexRow) -> Result<Matrix> {
    let fail = |line: usize, message: String| Error::Sample {
        sample_id: row.id.clone(),
        row: line,
        message,
    };
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| fail(0, format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| fail(1, e.to_string()))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let (ax, ay, az) = match (col("ax"), col("ay"), col("az")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(fail(1, "recording lacks ax,ay,az columns".into())),
    };
    let tcol = col("t");
    let window = match (row.walk_start_s, row.walk_end_s) {
        (Some(a), Some(b)) if a <= b => Some((a, b)),
        (None, None) => None,
        _ => {
            return Err(fail(
                0,
                "walk_start_s/walk_end_s must both be set with start <= end".into(),
            ))
        }
    };
    let mut data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| fail(line, e.to_string()))?;
        let num = |c: usize| -> Result<f64> {
            let cell = rec.get(c).unwrap_or("").trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| fail(line, format!("non-numeric cell '{cell}'")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(fail(line, format!("non-finite value '{cell}'")))
            }
        };
        let t = match tcol {
            Some(c) => num(c)?,
            None => i as f64 / row.fs_hz,
        };
        if let Some((a, b)) = window {
            if t < a || t > b {
                continue;
            }
        }
        data.extend_from_slice(&[num(ax)?, num(ay)?, num(az)?]);
    }
    if data.is_empty() {
        return Err(fail(0, "no samples inside the walk interval".into()));
    }
    Matrix::from_vec(data.len() / 3, 3, data)
}

/// Converts a staged dataset (see module docs) into the canonical layout
/// under `out_dir`, then checks label statistics against the published ones
/// for `wdsc`, `weallwalk` and `pedometer`.
pub fn convert_raw(
    dataset_name: &str,
    source_dir: &Path,
    out_dir: &Path,
) -> Result<ConvertOutcome> {
    let index = source_dir.join("index.csv");
    if !index.is_file() {
        return Err(unsupported(source_dir));
    }
    let mut reader = csv::Reader::from_path(&index).map_err(|_| unsupported(source_dir))?;
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<IndexRow>().enumerate() {
        let row = row.map_err(|e| Error::Manifest {
            path: index.clone(),
            message: format!("line {}: {e}", i + 2),
        })?;
        let raw = read_recording(&source_dir.join(&row.file), &row)?;
        let mut s = SignalSample::new(
            row.id.clone(),
            row.subject.clone(),
            raw,
            row.fs_hz,
            row.step_count,
        )?;
        s.meta = SampleMeta {
            placement: row.placement.clone().unwrap_or_default(),
            population: row
                .population
                .as_deref()
                .unwrap_or("")
                .parse::<Population>()?,
            regularity: row
                .regularity
                .as_deref()
                .unwrap_or("")
                .parse::<Regularity>()?,
        };
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(unsupported(source_dir));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = save_dataset(out_dir, dataset_name, &samples)?;
    let manifest = Manifest::read(&manifest_path)?;
    let checks = check_published(dataset_name, &samples)?;
    for c in &checks {
        if !c.passed {
            log::warn!(
                "{}: label statistics differ from the published values ({:?})",
                c.reference,
                c.observed
            );
        }
    }
    Ok(ConvertOutcome {
        manifest_path,
        manifest,
        checks,
    })
}

fn reference(name: &str) -> &'static super::ReferenceStats {
    TABLE_ONE
        .iter()
        .find(|r| r.name == name)
        .expect("known reference")
}

/// Published-statistics checks that apply to `dataset_name`.
pub fn check_published(dataset_name: &str, samples: &[SignalSample]) -> Result<Vec<StatsCheck>> {
    let mut out = Vec::new();
    match dataset_name.to_ascii_lowercase().as_str() {
        "wdsc" => out.push(check_against(
            label_stats(samples)?,
            reference("wdsc"),
            0.02,
        )),
        "weallwalk" => out.push(check_against(
            label_stats(samples)?,
            reference("weallwalk"),
            0.02,
        )),
        "pedometer" => {
            for (reg, name) in [
                (Regularity::Regular, "pedometer-regular"),
                (Regularity::SemiRegular, "pedometer-semi-regular"),
            ] {
                let subset: Vec<&SignalSample> = samples
                    .iter()
                    .filter(|s| s.meta.regularity == reg)
                    .collect();
                if !subset.is_empty() {
                    out.push(check_against(label_stats(subset)?, reference(name), 0.02));
                }
            }
        }
        _ => {}
    }
    Ok(out)
}
