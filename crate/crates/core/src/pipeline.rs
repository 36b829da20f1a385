//! Signal preprocessing and the synthetic gait generator.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SignalSample;
use crate::error::{Error, Result};
use crate::numkern::Matrix;

/// A (possibly preprocessed) multichannel series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub fs_hz: f64,
    /// `L x C`
    pub channels: Matrix,
    pub channel_names: Vec<String>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.channels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.rows() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.cols()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.fs_hz
    }

    /// Single-channel view of a univariate series.
    pub fn univariate(&self) -> Result<&[f64]> {
        if self.num_channels() != 1 {
            return Err(Error::shape(
                "univariate",
                format!("expected 1 channel, got {}", self.num_channels()),
            ));
        }
        Ok(self.channels.as_slice())
    }
}

/// Channels fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// ℓ2 norm of the three axes, `C = 1`.
    #[default]
    L2,
    /// Raw x, y, z, `C = 3`.
    Xyz,
    /// x, y, z and their ℓ2 norm, `C = 4`.
    L2Xyz,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::L2 => 1,
            InputMode::Xyz => 3,
            InputMode::L2Xyz => 4,
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(InputMode::L2),
            "xyz" => Ok(InputMode::Xyz),
            "l2xyz" | "l2+xyz" => Ok(InputMode::L2Xyz),
            other => Err(Error::InvalidArgument(format!(
                "unknown input mode '{other}' (expected l2, xyz, l2xyz)"
            ))),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::L2 => "l2",
            InputMode::Xyz => "xyz",
            InputMode::L2Xyz => "l2xyz",
        })
    }
}

/// Per-timestep Euclidean norm of an `L x 3` signal.
pub fn l2_norm(xyz: &Matrix) -> Result<Matrix> {
    if xyz.cols() != 3 {
        return Err(Error::shape(
            "l2_norm",
            format!("expected 3 channels, got {}", xyz.cols()),
        ));
    }
    let data = (0..xyz.rows())
        .map(|r| {
            let v = xyz.row(r);
            (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
        })
        .collect();
    Matrix::from_vec(xyz.rows(), 1, data)
}

/// Per-channel `(v - min) / (max - min)`. Constant channels become zeros.
pub fn minmax_normalize(series: &Matrix) -> Matrix {
    let mut out = series.clone();
    for c in 0..series.cols() {
        let (lo, hi) = (0..series.rows())
            .map(|r| series.get(r, c))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        if range > 0.0 {
            for r in 0..series.rows() {
                out.set(r, c, (series.get(r, c) - lo) / range);
            }
        } else {
            log::warn!("channel {c} is constant; normalized to zeros");
            for r in 0..series.rows() {
                out.set(r, c, 0.0);
            }
        }
    }
    out
}

/// Keeps rows `0, factor, 2*factor, ...` and divides the rate by `factor`.
pub fn downsample(series: &TimeSeries, factor: usize) -> Result<TimeSeries> {
    downsample_with(series, factor, false)
}

/// [`downsample`] with an optional centered box filter of width `factor`
/// applied before decimation.
pub fn downsample_with(series: &TimeSeries, factor: usize, lowpass: bool) -> Result<TimeSeries> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "downsample factor must be >= 1".into(),
        ));
    }
    if factor > series.len() {
        return Err(Error::Length(format!(
            "downsample factor {factor} exceeds series length {}",
            series.len()
        )));
    }
    if factor == 1 {
        return Ok(series.clone());
    }
    let src = if lowpass {
        box_filter(&series.channels, factor)
    } else {
        series.channels.clone()
    };
    let rows: Vec<&[f64]> = (0..src.rows())
        .step_by(factor)
        .map(|r| src.row(r))
        .collect();
    let mut data = Vec::with_capacity(rows.len() * src.cols());
    for r in &rows {
        data.extend_from_slice(r);
    }
    Ok(TimeSeries {
        fs_hz: series.fs_hz / factor as f64,
        channels: Matrix::from_vec(rows.len(), src.cols(), data)?,
        channel_names: series.channel_names.clone(),
    })
}

fn box_filter(m: &Matrix, width: usize) -> Matrix {
    let half = width / 2;
    let mut out = m.clone();
    for c in 0..m.cols() {
        for r in 0..m.rows() {
            let lo = r.saturating_sub(half);
            let hi = (r + width - half).min(m.rows());
            let sum: f64 = (lo..hi).map(|i| m.get(i, c)).sum();
            out.set(r, c, sum / (hi - lo) as f64);
        }
    }
    out
}

/// Downsample the raw axes, derive the norm if requested, then min-max
/// normalize every channel of the result.
pub fn build_input(
    sample: &SignalSample,
    mode: InputMode,
    downsample_factor: usize,
) -> Result<TimeSeries> {
    sample.validate()?;
    let raw = TimeSeries {
        fs_hz: sample.fs_hz,
        channels: sample.raw.clone(),
        channel_names: vec!["ax".into(), "ay".into(), "az".into()],
    };
    let ds = downsample(&raw, downsample_factor)?;
    let (channels, names) = match mode {
        InputMode::L2 => (l2_norm(&ds.channels)?, vec!["l2".to_string()]),
        InputMode::Xyz => (ds.channels.clone(), ds.channel_names.clone()),
        InputMode::L2Xyz => {
            let norm = l2_norm(&ds.channels)?;
            let mut names = ds.channel_names.clone();
            names.push("l2".into());
            (ds.channels.concat_cols(&norm)?, names)
        }
    };
    Ok(TimeSeries {
        fs_hz: ds.fs_hz,
        channels: minmax_normalize(&channels),
        channel_names: names,
    })
}

/// Parameters of one synthetic walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkSpec {
    pub num_steps: u32,
    pub fs_hz: f64,
    /// Nominal steps per second, in (0.5, 3.5).
    pub cadence_hz: f64,
    /// Standard deviation of the white noise added to each axis, in g.
    pub noise_sd: f64,
    /// Probability of a pause after each step.
    pub pause_prob: f64,
    /// Nominal pulse amplitude on top of the 1 g gravity level.
    pub amplitude: f64,
    /// Relative amplitude jitter, uniform in `±amplitude_jitter`.
    pub amplitude_jitter: f64,
    /// Relative inter-step interval jitter, uniform in `±interval_jitter`.
    pub interval_jitter: f64,
    /// Nominal pulse duration; shortened to half an interval at high cadence.
    pub pulse_duration_s: f64,
    /// Range of pause lengths in seconds.
    pub pause_s: (f64, f64),
}

impl Default for WalkSpec {
    fn default() -> Self {
        Self {
            num_steps: 20,
            fs_hz: 25.0,
            cadence_hz: 1.8,
            noise_sd: 0.0,
            pause_prob: 0.0,
            amplitude: 0.5,
            amplitude_jitter: 0.3,
            interval_jitter: 0.2,
            pulse_duration_s: 0.3,
            pause_s: (0.5, 2.0),
        }
    }
}

impl WalkSpec {
    /// Noise-free, jitter-free, pause-free walk.
    pub fn clean(num_steps: u32, fs_hz: f64, cadence_hz: f64) -> Self {
        Self {
            num_steps,
            fs_hz,
            cadence_hz,
            amplitude_jitter: 0.0,
            interval_jitter: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.cadence_hz > 0.5 && self.cadence_hz < 3.5) {
            return Err(Error::InvalidArgument(format!(
                "cadence {} Hz outside (0.5, 3.5)",
                self.cadence_hz
            )));
        }
        let checks = [
            (self.fs_hz > 0.0, "fs_hz must be positive"),
            (self.noise_sd >= 0.0, "noise_sd must be >= 0"),
            (
                (0.0..=1.0).contains(&self.pause_prob),
                "pause_prob must be in [0, 1]",
            ),
            (self.amplitude > 0.0, "amplitude must be positive"),
            (
                (0.0..1.0).contains(&self.amplitude_jitter),
                "amplitude_jitter must be in [0, 1)",
            ),
            (
                (0.0..=0.5).contains(&self.interval_jitter),
                "interval_jitter must be in [0, 0.5]",
            ),
            (
                self.pulse_duration_s > 0.0,
                "pulse_duration_s must be positive",
            ),
            (
                self.pause_s.0 >= 0.0 && self.pause_s.0 <= self.pause_s.1,
                "invalid pause range",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidArgument((*msg).into())),
            None => Ok(()),
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Step centers (seconds), total duration (seconds) and per-step amplitudes.
struct Timeline {
    centers: Vec<f64>,
    amplitudes: Vec<f64>,
    duration: f64,
}

fn timeline(spec: &WalkSpec, rng: &mut ChaCha8Rng) -> Timeline {
    let period = 1.0 / spec.cadence_hz;
    let mut centers = Vec::with_capacity(spec.num_steps as usize);
    let mut amplitudes = Vec::with_capacity(spec.num_steps as usize);
    let mut t = period / 2.0;
    for k in 0..spec.num_steps {
        if k > 0 {
            let jitter = if spec.interval_jitter > 0.0 {
                rng.random_range(-spec.interval_jitter..=spec.interval_jitter)
            } else {
                0.0
            };
            t += period * (1.0 + jitter);
            if spec.pause_prob > 0.0 && rng.random_bool(spec.pause_prob) {
                t += rng.random_range(spec.pause_s.0..=spec.pause_s.1);
            }
        }
        let a = if spec.amplitude_jitter > 0.0 {
            rng.random_range(-spec.amplitude_jitter..=spec.amplitude_jitter)
        } else {
            0.0
        };
        centers.push(t);
        amplitudes.push(spec.amplitude * (1.0 + a));
    }
    let duration = if spec.num_steps == 0 {
        period
    } else {
        t + period / 2.0
    };
    Timeline {
        centers,
        amplitudes,
        duration,
    }
}

/// Generates a labelled triaxial walk.
///
/// The signal is a 1 g gravity vector along a random direction, plus exactly
/// `num_steps` half-sine pulses along a random direction within 60° of
/// gravity (so every pulse raises the norm), plus white noise on every axis.
/// The label is `num_steps`. Identical seeds give bit-identical samples.
pub fn synthesize_walk(seed: u64, spec: &WalkSpec) -> Result<SignalSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gravity = unit_vector(&mut rng);
    let direction = loop {
        let u = unit_vector(&mut rng);
        if u[0] * gravity[0] + u[1] * gravity[1] + u[2] * gravity[2] >= 0.5 {
            break u;
        }
    };
    let tl = timeline(spec, &mut rng);
    let width = spec.pulse_duration_s.min(0.5 / spec.cadence_hz);
    let len = ((tl.duration * spec.fs_hz).ceil() as usize).max(1);

    let mut pulse = vec![0.0; len];
    for (&c, &a) in tl.centers.iter().zip(&tl.amplitudes) {
        let first = (((c - width / 2.0) * spec.fs_hz).floor().max(0.0)) as usize;
        let last = (((c + width / 2.0) * spec.fs_hz).ceil() as usize).min(len - 1);
        for (i, p) in pulse.iter_mut().enumerate().take(last + 1).skip(first) {
            let phase = (i as f64 / spec.fs_hz - c + width / 2.0) / width;
            if phase > 0.0 && phase < 1.0 {
                *p += a * (std::f64::consts::PI * phase).sin();
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(len * 3);
    for &p in &pulse {
        for k in 0..3 {
            let n = if spec.noise_sd > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            data.push(gravity[k] + direction[k] * p + n);
        }
    }
    SignalSample::new(
        format!("walk-{seed}"),
        "synthetic",
        Matrix::from_vec(len, 3, data)?,
        spec.fs_hz,
        spec.num_steps,
    )
}

/// A population of synthetic walks with varied length and cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub fs_hz: f64,
    /// Inclusive range of step counts.
    pub steps: (u32, u32),
    /// Target walking duration range in seconds (pauses come on top).
    pub duration_s: (f64, f64),
    /// Allowed cadence range.
    pub cadence_hz: (f64, f64),
    pub noise_sd: f64,
    pub pause_prob: f64,
    pub amplitude: f64,
    pub amplitude_jitter: f64,
    pub interval_jitter: f64,
    /// Number of distinct synthetic subjects, assigned round-robin.
    pub subjects: usize,
}

impl CohortSpec {
    /// The noisy desk-scale family: 25 Hz, 8-40 steps over 5-25 s, amplitude
    /// and interval jitter, pauses, 0.02 g sensor noise.
    pub fn noisy() -> Self {
        Self {
            fs_hz: 25.0,
            steps: (8, 40),
            duration_s: (5.0, 25.0),
            cadence_hz: (1.4, 2.2),
            noise_sd: 0.02,
            pause_prob: 0.1,
            amplitude: 0.5,
            amplitude_jitter: 0.3,
            interval_jitter: 0.2,
            subjects: 10,
        }
    }

    /// Same ranges as [`CohortSpec::noisy`] without noise, jitter or pauses.
    pub fn clean() -> Self {
        Self {
            noise_sd: 0.0,
            pause_prob: 0.0,
            amplitude_jitter: 0.0,
            interval_jitter: 0.0,
            ..Self::noisy()
        }
    }

    fn walk(&self, rng: &mut ChaCha8Rng) -> WalkSpec {
        let n = rng.random_range(self.steps.0..=self.steps.1);
        let lo = self.cadence_hz.0.max(n as f64 / self.duration_s.1);
        let hi = self.cadence_hz.1.min(n as f64 / self.duration_s.0);
        let cadence = if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo.min(self.cadence_hz.1)
        };
        WalkSpec {
            num_steps: n,
            fs_hz: self.fs_hz,
            cadence_hz: cadence,
            noise_sd: self.noise_sd,
            pause_prob: self.pause_prob,
            amplitude_jitter: self.amplitude_jitter,
            interval_jitter: self.interval_jitter,
            amplitude: self.amplitude,
            ..WalkSpec::default()
        }
    }
}

/// `n` walks drawn from `spec`, with ids `synth-0000..` and round-robin subjects.
pub fn synthesize_cohort(seed: u64, n: usize, spec: &CohortSpec) -> Result<Vec<SignalSample>> {
    if spec.steps.0 > spec.steps.1 || spec.subjects == 0 {
        return Err(Error::InvalidArgument("invalid cohort spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let walk = spec.walk(&mut rng);
            let walk_seed: u64 = rng.random();
            let mut s = synthesize_walk(walk_seed, &walk)?;
            s.id = format!("synth-{i:04}");
            s.subject = format!("subj{:02}", i % spec.subjects);
            s.meta.placement = "synthetic".into();
            Ok(s)
        })
        .collect()
}
