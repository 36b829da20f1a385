//! Canonical dataset layout.
//!
//! ```text
//! <dir>/manifest.jsonl
//! <dir>/samples/<id>.csv
//! ```
//!
//! `manifest.jsonl` is UTF-8 JSON Lines. The first line is the header
//! `{"schema":"stepcount.manifest","version":1,"dataset":"<name>"}`; every
//! following line describes one recording:
//!
//! ```text
//! {"id":"..","path":"samples/...csv","subject":"..","placement":"..",
//!  "population":"sighted|cane|dog|n/a","regularity":"regular|semi-regular|n/a",
//!  "fs_hz":25.0,"step_count":31}
//! ```
//!
//! `path` is relative to the manifest's directory. Each sample file is CSV
//! with the header `t,ax,ay,az`, one row per timestep, `t` in seconds and
//! strictly increasing. Values are written in Rust's shortest round-trip
//! decimal form, so save followed by load is bit-exact.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Matrix;

use super::{Population, Regularity, SampleMeta, SignalSample};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCHEMA: &str = "stepcount.manifest";
pub const SCHEMA_VERSION: u32 = 1;
pub const SAMPLE_HEADER: [&str; 4] = ["t", "ax", "ay", "az"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub subject: String,
    #[serde(default)]
    pub placement: String,
    #[serde(default)]
    pub population: Population,
    #[serde(default)]
    pub regularity: Regularity,
    pub fs_hz: f64,
    pub step_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dataset: String,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                Some((_, Ok(l))) if l.trim().is_empty() => continue,
                Some((_, Ok(l))) => {
                    break serde_json::from_str(&l).map_err(|e| bad(format!("header: {e}")))?
                }
                Some((_, Err(e))) => return Err(Error::io(path, e)),
                None => return Err(bad("empty manifest".into())),
            }
        };
        if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
            return Err(bad(format!(
                "schema {} v{} is not {SCHEMA} v{SCHEMA_VERSION}",
                header.schema, header.version
            )));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            if rec.subject.trim().is_empty() {
                return Err(bad(format!(
                    "line {}: sample {} has no subject",
                    n + 1,
                    rec.id
                )));
            }
            if !seen.insert(rec.id.clone()) {
                return Err(bad(format!("line {}: duplicate id {}", n + 1, rec.id)));
            }
            records.push(rec);
        }
        Ok(Self {
            dataset: header.dataset,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            dataset: self.dataset.clone(),
        };
        let mut emit = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
        emit(serde_json::to_string(&header).expect("serializable"))?;
        for r in &self.records {
            emit(serde_json::to_string(r).expect("serializable"))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// File-name-safe form of a sample id.
pub(crate) fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `samples` as a canonical dataset under `dir`; returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &str, samples: &[SignalSample]) -> Result<PathBuf> {
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut stems = HashSet::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let stem = file_stem(&s.id);
        if !stems.insert(stem.clone()) {
            return Err(Error::InvalidArgument(format!(
                "sample id {} collides with another id on disk",
                s.id
            )));
        }
        let rel = format!("samples/{stem}.csv");
        write_sample_csv(&dir.join(&rel), s)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            path: rel,
            subject: s.subject.clone(),
            placement: s.meta.placement.clone(),
            population: s.meta.population,
            regularity: s.meta.regularity,
            fs_hz: s.fs_hz,
            step_count: s.step_count,
        });
    }
    let manifest = Manifest {
        dataset: dataset.into(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}

pub(crate) fn write_sample_csv(path: &Path, s: &SignalSample) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SAMPLE_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in 0..s.raw.rows() {
        let t = r as f64 / s.fs_hz;
        let row = s.raw.row(r);
        w.write_record([t, row[0], row[1], row[2]].iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn read_sample_csv(path: &Path, rec: &ManifestRecord) -> Result<Matrix> {
    let fail = |row: usize, message: String| Error::Sample {
        sample_id: rec.id.clone(),
        row,
        message,
    };
    if !path.is_file() {
        return Err(fail(0, format!("missing file {}", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| fail(0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| fail(1, e.to_string()))?
        .clone();
    if header.iter().map(str::trim).ne(SAMPLE_HEADER) {
        return Err(fail(
            1,
            format!(
                "header {:?} is not t,ax,ay,az",
                header.iter().collect::<Vec<_>>()
            ),
        ));
    }
    let mut data = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| fail(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(fail(line, format!("{} fields, expected 4", record.len())));
        }
        let mut vals = [0.0; 4];
        for (v, cell) in vals.iter_mut().zip(record.iter()) {
            *v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| fail(line, format!("non-numeric cell '{cell}'")))?;
            if !v.is_finite() {
                return Err(fail(line, format!("non-finite value '{cell}'")));
            }
        }
        if vals[0] <= last_t {
            return Err(fail(line, "time column is not strictly increasing".into()));
        }
        last_t = vals[0];
        data.extend_from_slice(&vals[1..]);
    }
    if data.is_empty() {
        return Err(fail(0, "no data rows".into()));
    }
    Matrix::from_vec(data.len() / 3, 3, data)
}

fn load_record(base: &Path, rec: &ManifestRecord) -> Result<SignalSample> {
    let raw = read_sample_csv(&base.join(&rec.path), rec)?;
    let sample = SignalSample {
        id: rec.id.clone(),
        subject: rec.subject.clone(),
        raw,
        fs_hz: rec.fs_hz,
        step_count: rec.step_count,
        meta: SampleMeta {
            placement: rec.placement.clone(),
            population: rec.population,
            regularity: rec.regularity,
        },
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every sample referenced by a manifest. Fails as a whole on the first
/// malformed sample (in manifest order).
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SignalSample>> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let loaded: Vec<Result<SignalSample>> = manifest
        .records
        .par_iter()
        .map(|rec| load_record(base, rec))
        .collect();
    loaded.into_iter().collect()
}
