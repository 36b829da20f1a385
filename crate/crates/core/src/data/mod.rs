//! Recordings, the canonical on-disk dataset format, and label statistics.
//!
//! A dataset directory holds `manifest.jsonl` plus one CSV per recording. See
//! [`store`] for the exact byte layout.

mod convert;
mod stats;
pub mod store;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Matrix;

pub use convert::{check_published, convert_raw, ConvertOutcome, EXPECTED_LAYOUT};
pub use stats::{check_against, label_stats, LabelStats, ReferenceStats, StatsCheck, TABLE_ONE};
pub use store::{
    load_dataset, save_dataset, Manifest, ManifestRecord, MANIFEST_FILE, SCHEMA, SCHEMA_VERSION,
};

/// Environment variable naming the directory that holds converted datasets.
pub const DATA_DIR_ENV: &str = "STEPCOUNT_DATA_DIR";

/// Dataset root from [`DATA_DIR_ENV`], if set.
pub fn dataset_root() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// `<root>/<name>/manifest.jsonl` when it exists.
pub fn locate_manifest(name: &str) -> Option<PathBuf> {
    let path = dataset_root()?.join(name).join(MANIFEST_FILE);
    path.is_file().then_some(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Population {
    #[serde(rename = "sighted")]
    Sighted,
    #[serde(rename = "cane")]
    Cane,
    #[serde(rename = "dog")]
    Dog,
    #[default]
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Regularity {
    #[serde(rename = "regular")]
    Regular,
    #[serde(rename = "semi-regular")]
    SemiRegular,
    #[default]
    #[serde(rename = "n/a")]
    NotApplicable,
}

macro_rules! str_enum {
    ($ty:ty { $($s:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($s => Ok($v),)+
                    "" => Ok(Self::default()),
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $(x if *x == $v => $s,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
    };
}

str_enum!(Population {
    "sighted" => Population::Sighted,
    "cane" => Population::Cane,
    "dog" => Population::Dog,
    "n/a" => Population::NotApplicable,
});

str_enum!(Regularity {
    "regular" => Regularity::Regular,
    "semi-regular" => Regularity::SemiRegular,
    "n/a" => Regularity::NotApplicable,
});

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    pub placement: String,
    pub population: Population,
    pub regularity: Regularity,
}

/// One recording: triaxial accelerometer signal and its step count.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample {
    pub id: String,
    pub subject: String,
    /// `L x 3` (x, y, z) in sensor units.
    pub raw: Matrix,
    pub fs_hz: f64,
    pub step_count: u32,
    pub meta: SampleMeta,
}

impl SignalSample {
    pub fn new(
        id: impl Into<String>,
        subject: impl Into<String>,
        raw: Matrix,
        fs_hz: f64,
        step_count: u32,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            subject: subject.into(),
            raw,
            fs_hz,
            step_count,
            meta: SampleMeta::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.raw.rows() as f64 / self.fs_hz
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |row: usize, message: String| Error::Sample {
            sample_id: self.id.clone(),
            row,
            message,
        };
        if self.raw.cols() != 3 {
            return Err(fail(
                0,
                format!("expected 3 channels, got {}", self.raw.cols()),
            ));
        }
        if self.raw.rows() == 0 {
            return Err(fail(0, "empty signal".into()));
        }
        if !(self.fs_hz > 0.0 && self.fs_hz.is_finite()) {
            return Err(fail(0, format!("invalid sampling rate {}", self.fs_hz)));
        }
        if let Some(r) =
            (0..self.raw.rows()).find(|&r| !self.raw.row(r).iter().all(|v| v.is_finite()))
        {
            return Err(fail(r, "non-finite value".into()));
        }
        Ok(())
    }
}
