//! Classical step counters: peak picking, threshold crossing and
//! autocorrelation. All take a univariate (normally the min-max normalized
//! ℓ2) series.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::TimeSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Moving-average window for peak and threshold counting.
    pub smooth_window_s: f64,
    /// Peak threshold above the mean, and hysteresis band width, in units of
    /// the smoothed signal's standard deviation.
    pub peak_min_prominence_k: f64,
    pub min_step_interval_s: f64,
    /// Admissible cadence range for the autocorrelation period search.
    pub cadence_band_hz: (f64, f64),
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            smooth_window_s: 0.25,
            peak_min_prominence_k: 0.5,
            min_step_interval_s: 0.33,
            cadence_band_hz: (0.6, 3.0),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.cadence_band_hz;
        if self.smooth_window_s > 0.0
            && self.peak_min_prominence_k > 0.0
            && self.min_step_interval_s > 0.0
            && lo > 0.0
            && lo < hi
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid baseline configuration {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Peaks,
    Threshold,
    Autocorr,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 3] = [
        BaselineMethod::Peaks,
        BaselineMethod::Threshold,
        BaselineMethod::Autocorr,
    ];
}

impl FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peaks" | "peak" => Ok(BaselineMethod::Peaks),
            "threshold" => Ok(BaselineMethod::Threshold),
            "autocorr" | "autocorrelation" => Ok(BaselineMethod::Autocorr),
            other => Err(Error::InvalidArgument(format!(
                "unknown baseline '{other}' (expected peaks, threshold, autocorr)"
            ))),
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::Peaks => "peaks",
            BaselineMethod::Threshold => "threshold",
            BaselineMethod::Autocorr => "autocorr",
        })
    }
}

/// Runs `method`, discarding the autocorrelation confidence flag.
pub fn count_with(
    method: BaselineMethod,
    series: &TimeSeries,
    config: &BaselineConfig,
) -> Result<u32> {
    match method {
        BaselineMethod::Peaks => count_peaks(series, config),
        BaselineMethod::Threshold => count_threshold(series, config),
        BaselineMethod::Autocorr => count_autocorrelation(series, config).map(|r| r.count),
    }
}

fn samples_for(seconds: f64, fs: f64) -> usize {
    ((seconds * fs).round() as usize).max(1)
}

/// Centered moving average with shrinking windows at the edges. Each window
/// is summed directly so equal windows give bit-equal outputs.
fn smooth(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + width - half).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn smoothed(series: &TimeSeries, config: &BaselineConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let x = series.univariate()?;
    let width = samples_for(config.smooth_window_s, series.fs_hz);
    if x.is_empty() || width > x.len() {
        return Err(Error::Length(format!(
            "smoothing window of {width} samples exceeds signal length {}",
            x.len()
        )));
    }
    Ok(smooth(x, width))
}

/// Local maxima of the smoothed signal above `mean + k·std`. Peaks closer
/// than the minimum step interval are merged, keeping the higher one.
pub fn count_peaks(series: &TimeSeries, config: &BaselineConfig) -> Result<u32> {
    let y = smoothed(series, config)?;
    let (mean, std) = mean_std(&y);
    if std == 0.0 {
        return Ok(0);
    }
    let threshold = mean + config.peak_min_prominence_k * std;
    let min_gap = samples_for(config.min_step_interval_s, series.fs_hz);
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..y.len().saturating_sub(1) {
        if !(y[i] > y[i - 1] && y[i] >= y[i + 1] && y[i] > threshold) {
            continue;
        }
        match peaks.last_mut() {
            Some(last) if i - *last < min_gap => {
                if y[i] > y[*last] {
                    *last = i;
                }
            }
            _ => peaks.push(i),
        }
    }
    Ok(peaks.len() as u32)
}

/// Upward crossings of `mean + k·std/2` after the smoothed signal was last
/// below `mean - k·std/2`.
pub fn count_threshold(series: &TimeSeries, config: &BaselineConfig) -> Result<u32> {
    let y = smoothed(series, config)?;
    let (mean, std) = mean_std(&y);
    if std == 0.0 {
        return Ok(0);
    }
    let band = config.peak_min_prominence_k * std / 2.0;
    let (lo, hi) = (mean - band, mean + band);
    let mut armed = y[0] < mean;
    let mut count = 0;
    for &v in &y {
        if armed && v > hi {
            count += 1;
            armed = false;
        } else if !armed && v < lo {
            armed = true;
        }
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutocorrResult {
    pub count: u32,
    pub period_s: f64,
    /// Autocorrelation at the chosen lag.
    pub r: f64,
    /// Set when no in-band local maximum exists or it is weak (`r < 0.3`).
    pub low_confidence: bool,
}

/// Pearson correlation of the series with itself shifted by `lag`.
fn acf(x: &[f64], lag: usize) -> f64 {
    let n = x.len() - lag;
    let (a, b) = (&x[..n], &x[lag..]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (u, v) in a.iter().zip(b) {
        let (du, dv) = (u - ma, v - mb);
        sab += du * dv;
        saa += du * du;
        sbb += dv * dv;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Vertex offset of the parabola through three equally spaced points.
fn parabolic(ym: f64, y0: f64, yp: f64) -> f64 {
    let denom = ym - 2.0 * y0 + yp;
    if denom >= 0.0 {
        0.0
    } else {
        (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
    }
}

fn local_peak(r: &dyn Fn(usize) -> f64, lo: usize, hi: usize) -> Option<(usize, f64)> {
    (lo.max(1)..=hi)
        .filter(|&t| {
            let v = r(t);
            v > r(t - 1) && v >= r(t + 1)
        })
        .map(|t| (t, r(t)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

/// Period from the normalized autocorrelation within the cadence band, then
/// `count = round(duration / period)`.
///
/// The smallest-lag in-band local maximum within 90% of the best one gives a
/// coarse period, which is refined by locating its highest measurable
/// harmonic and interpolating the peak.
pub fn count_autocorrelation(
    series: &TimeSeries,
    config: &BaselineConfig,
) -> Result<AutocorrResult> {
    config.validate()?;
    let x = series.univariate()?;
    let fs = series.fs_hz;
    let (f_lo, f_hi) = config.cadence_band_hz;
    let lag_min = ((fs / f_hi).floor() as usize).max(2);
    let lag_max = (fs / f_lo).ceil() as usize;
    if x.len() < 2 * lag_max + 2 {
        return Err(Error::Length(format!(
            "autocorrelation needs at least {} samples (two slowest periods), got {}",
            2 * lag_max + 2,
            x.len()
        )));
    }
    let (_, std) = mean_std(x);
    if std == 0.0 {
        return Ok(AutocorrResult {
            count: 0,
            period_s: f64::INFINITY,
            r: 0.0,
            low_confidence: true,
        });
    }
    let r = |lag: usize| acf(x, lag);
    let candidates: Vec<(usize, f64)> = (lag_min..=lag_max)
        .filter(|&t| {
            let v = r(t);
            v > r(t - 1) && v >= r(t + 1)
        })
        .map(|t| (t, r(t)))
        .collect();
    let (lag, peak, low_confidence) = match candidates.iter().map(|c| c.1).reduce(f64::max) {
        Some(best) => {
            let &(lag, v) = candidates
                .iter()
                .find(|c| c.1 >= 0.9 * best)
                .expect("best exists");
            (lag, v, v < 0.3)
        }
        None => {
            let (lag, v) = (lag_min..=lag_max)
                .map(|t| (t, r(t)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty band");
            (lag, v, true)
        }
    };
    let refine = |t: usize| t as f64 + parabolic(r(t - 1), r(t), r(t + 1));
    let mut period = refine(lag);
    if !low_confidence {
        let max_lag = x.len() / 2;
        let mut k = 2;
        while ((k as f64 + 0.5) * period) as usize <= max_lag {
            let center = k as f64 * period;
            let lo = (center - period / 4.0).floor() as usize;
            let hi = ((center + period / 4.0).ceil() as usize).min(max_lag);
            match local_peak(&r, lo, hi) {
                Some((t, v)) if v >= 0.5 * peak => period = refine(t) / k as f64,
                _ => break,
            }
            k += 1;
        }
    }
    let period_s = period / fs;
    let duration = x.len() as f64 / fs;
    Ok(AutocorrResult {
        count: (duration / period_s).round() as u32,
        period_s,
        r: peak,
        low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::Matrix;
    use crate::pipeline::{build_input, minmax_normalize, synthesize_walk, InputMode, WalkSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ts(values: Vec<f64>, fs: f64) -> TimeSeries {
        TimeSeries {
            fs_hz: fs,
            channels: Matrix::column_vector(&values),
            channel_names: vec!["l2".into()],
        }
    }

    fn sine(f: f64, seconds: f64, fs: f64) -> TimeSeries {
        let n = (seconds * fs).round() as usize;
        ts(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin())
                .collect(),
            fs,
        )
    }

    fn clean_walk(seed: u64, n: u32, cadence: f64) -> TimeSeries {
        build_input(
            &synthesize_walk(seed, &WalkSpec::clean(n, 25.0, cadence)).unwrap(),
            InputMode::L2,
            1,
        )
        .unwrap()
    }

    #[test]
    fn constant_signal_counts_zero() {
        let c = ts(vec![0.0; 200], 25.0);
        let cfg = BaselineConfig::default();
        assert_eq!(count_peaks(&c, &cfg).unwrap(), 0);
        assert_eq!(count_threshold(&c, &cfg).unwrap(), 0);
        let a = count_autocorrelation(&c, &cfg).unwrap();
        assert!(a.low_confidence && a.count == 0);
    }

    #[test]
    fn clean_twenty_pulse_walk() {
        let s = clean_walk(3, 20, 1.8);
        let cfg = BaselineConfig::default();
        assert_eq!(count_peaks(&s, &cfg).unwrap(), 20);
        assert_eq!(count_threshold(&s, &cfg).unwrap(), 20);
        assert_eq!(count_autocorrelation(&s, &cfg).unwrap().count, 20);
    }

    #[test]
    fn close_pulses_are_merged() {
        let mut v = vec![0.0; 50];
        v[20] = 1.0;
        v[25] = 0.9; // 0.2 s later at 25 Hz
        let s = ts(v, 25.0);
        let cfg = BaselineConfig {
            smooth_window_s: 0.04,
            ..BaselineConfig::default()
        };
        assert_eq!(count_peaks(&s, &cfg).unwrap(), 1);
        let cfg = BaselineConfig {
            min_step_interval_s: 0.1,
            ..cfg
        };
        assert_eq!(count_peaks(&s, &cfg).unwrap(), 2);
    }

    #[test]
    fn sine_counts() {
        let cfg = BaselineConfig::default();
        for (f, secs) in [(1.0, 10.0), (1.7, 12.0), (2.0, 10.0), (2.6, 7.0)] {
            let s = sine(f, secs, 50.0);
            let expect = (f * secs).floor() as i64;
            let got = count_threshold(&s, &cfg).unwrap() as i64;
            assert!((got - expect).abs() <= 1, "f={f}: {got} vs {expect}");
        }
        let a = count_autocorrelation(&sine(2.0, 10.0, 25.0), &cfg).unwrap();
        assert_eq!(a.count, 20);
        assert!(!a.low_confidence);
        assert!((a.period_s - 0.5).abs() < 1e-3);
    }

    #[test]
    fn regular_thirty_second_walk() {
        let s = clean_walk(8, 54, 1.8);
        assert!((s.duration_s() - 30.0).abs() < 0.1);
        let c = count_autocorrelation(&s, &BaselineConfig::default())
            .unwrap()
            .count as i64;
        assert!((c - 54).abs() <= 2);
    }

    #[test]
    fn white_noise_is_low_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ts((0..500).map(|_| rng.random_range(0.0..1.0)).collect(), 25.0);
        assert!(
            count_autocorrelation(&s, &BaselineConfig::default())
                .unwrap()
                .low_confidence
        );
    }

    #[test]
    fn input_errors() {
        let cfg = BaselineConfig::default();
        let short = ts(vec![0.0, 1.0, 0.0], 25.0);
        assert!(count_peaks(&short, &cfg).is_err());
        assert!(count_autocorrelation(&short, &cfg).is_err());
        let multi = TimeSeries {
            fs_hz: 25.0,
            channels: Matrix::zeros(50, 3),
            channel_names: vec![],
        };
        assert!(count_threshold(&multi, &cfg).is_err());
        assert!(BaselineConfig {
            cadence_band_hz: (3.0, 1.0),
            ..cfg
        }
        .validate()
        .is_err());
        assert_eq!(
            "autocorr".parse::<BaselineMethod>().unwrap(),
            BaselineMethod::Autocorr
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn exact_on_clean_family(seed in 0u64..10_000, n in 8u32..40, cadence in 1.4f64..2.2) {
            let s = clean_walk(seed, n, cadence);
            let cfg = BaselineConfig::default();
            for m in BaselineMethod::ALL {
                prop_assert_eq!(count_with(m, &s, &cfg).unwrap(), n, "{}", m);
            }
        }

        #[test]
        fn affine_invariance(seed in 0u64..10_000, a in 0.1f64..50.0, b in -20.0f64..20.0) {
            let spec = WalkSpec { noise_sd: 0.1, ..WalkSpec::default() };
            let s = build_input(&synthesize_walk(seed, &spec).unwrap(), InputMode::L2, 1).unwrap();
            let moved = TimeSeries {
                channels: minmax_normalize(&s.channels.map(|v| a * v + b)),
                ..s.clone()
            };
            let cfg = BaselineConfig::default();
            for m in BaselineMethod::ALL {
                prop_assert_eq!(count_with(m, &s, &cfg).unwrap(), count_with(m, &moved, &cfg).unwrap());
            }
        }
    }
}
