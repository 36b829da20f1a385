//! Step-count metrics, cross-validation folds, and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SignalSample;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::pipeline::{build_input, InputMode};
use crate::train::{fit, predict_all, with_pool, Example, TrainConfig};

fn check_true(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "true count must be positive, got {t}"
        )))
    }
}

/// Signed percentage error `(pred - true) / true * 100`.
pub fn error_rate(pred: f64, true_count: f64) -> Result<f64> {
    check_true(true_count)?;
    Ok((pred - true_count) / true_count * 100.0)
}

/// Running count accuracy `pred / true`.
pub fn rca(pred: f64, true_count: f64) -> Result<f64> {
    check_true(true_count)?;
    Ok(pred / true_count)
}

/// `(1 - |pred - true| / true) * 100`; negative for gross errors.
pub fn acc(pred: f64, true_count: f64) -> Result<f64> {
    check_true(true_count)?;
    Ok((1.0 - (pred - true_count).abs() / true_count) * 100.0)
}

/// How undercount and overcount percentages are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UcOcMode {
    /// Missed (or extra) steps as a percentage of all true steps.
    #[default]
    StepNormalized,
    /// Percentage of samples with negative (or positive) error.
    SampleCount,
}

fn check_pairs(preds: &[f64], trues: &[f64]) -> Result<()> {
    if preds.len() != trues.len() {
        return Err(Error::Length(format!(
            "{} predictions vs {} true counts",
            preds.len(),
            trues.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Length("no samples to evaluate".into()));
    }
    trues.iter().try_for_each(|&t| check_true(t))
}

/// `(uc, oc)` in percent.
pub fn under_over_count(preds: &[f64], trues: &[f64], mode: UcOcMode) -> Result<(f64, f64)> {
    check_pairs(preds, trues)?;
    let pairs = preds.iter().zip(trues);
    Ok(match mode {
        UcOcMode::StepNormalized => {
            let total: f64 = trues.iter().sum();
            let (u, o) = pairs.fold((0.0, 0.0), |(u, o), (p, t)| {
                (u + (t - p).max(0.0), o + (p - t).max(0.0))
            });
            (u / total * 100.0, o / total * 100.0)
        }
        UcOcMode::SampleCount => {
            let n = preds.len() as f64;
            let (u, o) = pairs.fold((0usize, 0usize), |(u, o), (p, t)| {
                (u + usize::from(p < t), o + usize::from(p > t))
            });
            (u as f64 / n * 100.0, o as f64 / n * 100.0)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricOptions {
    pub uc_oc: UcOcMode,
    /// Round predictions to the nearest integer before scoring.
    pub round_predictions: bool,
}

/// Pooled metrics. Means and (population) standard deviations of ER, RCA
/// and ACC are taken over samples; ACC is on the percentage scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub mae: f64,
    pub er_mean: f64,
    pub er_std: f64,
    pub rca_mean: f64,
    pub rca_std: f64,
    pub uc: f64,
    pub oc: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn compute_metrics(preds: &[f64], trues: &[f64], opts: MetricOptions) -> Result<MetricsReport> {
    check_pairs(preds, trues)?;
    let preds: Vec<f64> = if opts.round_predictions {
        preds.iter().map(|p| p.round()).collect()
    } else {
        preds.to_vec()
    };
    let n = preds.len();
    let mut er = Vec::with_capacity(n);
    let mut rc = Vec::with_capacity(n);
    let mut ac = Vec::with_capacity(n);
    let mut abs = 0.0;
    for (&p, &t) in preds.iter().zip(trues) {
        er.push(error_rate(p, t)?);
        rc.push(rca(p, t)?);
        ac.push(acc(p, t)?);
        abs += (p - t).abs();
    }
    let (uc, oc) = under_over_count(&preds, trues, opts.uc_oc)?;
    let (er_mean, er_std) = mean_std(&er);
    let (rca_mean, rca_std) = mean_std(&rc);
    let (acc_mean, acc_std) = mean_std(&ac);
    Ok(MetricsReport {
        n_samples: n,
        mae: abs / n as f64,
        er_mean,
        er_std,
        rca_mean,
        rca_std,
        uc,
        oc,
        acc_mean,
        acc_std,
    })
}

/// Cross-validation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    KFold(usize),
    LeaveOneSubjectOut,
    LeaveTwoSubjectsOut,
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loso" => Ok(Scheme::LeaveOneSubjectOut),
            "l2so" => Ok(Scheme::LeaveTwoSubjectsOut),
            other => match other.strip_prefix("kfold").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 2 => Ok(Scheme::KFold(k)),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown scheme '{other}' (expected kfold5, loso, l2so)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::KFold(k) => write!(f, "kfold{k}"),
            Scheme::LeaveOneSubjectOut => f.write_str("loso"),
            Scheme::LeaveTwoSubjectsOut => f.write_str("l2so"),
        }
    }
}

/// Indices into the sample list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub scheme: Scheme,
    pub folds: Vec<Fold>,
}

/// Splits `samples` according to `scheme`.
///
/// k-fold shuffles with `seed` and gives the first `n % k` folds one extra
/// sample. Subject schemes sort subject ids; leave-two-out pairs them
/// consecutively, an odd subject out forming a last single-subject fold.
pub fn make_folds(samples: &[SignalSample], scheme: Scheme, seed: u64) -> Result<FoldSpec> {
    let n = samples.len();
    let groups: Vec<Vec<usize>> = match scheme {
        Scheme::KFold(k) => {
            if k < 2 || n < k {
                return Err(Error::InvalidArgument(format!(
                    "{k}-fold split of {n} samples"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (base, extra) = (n / k, n % k);
            let mut start = 0;
            (0..k)
                .map(|f| {
                    let size = base + usize::from(f < extra);
                    let g = idx[start..start + size].to_vec();
                    start += size;
                    g
                })
                .collect()
        }
        Scheme::LeaveOneSubjectOut | Scheme::LeaveTwoSubjectsOut => {
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in samples.iter().enumerate() {
                by_subject.entry(s.subject.as_str()).or_default().push(i);
            }
            let per = if scheme == Scheme::LeaveOneSubjectOut {
                1
            } else {
                2
            };
            let needed = per + 1;
            if by_subject.len() < needed {
                return Err(Error::InvalidArgument(format!(
                    "{scheme} needs at least {needed} subjects, found {}",
                    by_subject.len()
                )));
            }
            let subjects: Vec<Vec<usize>> = by_subject.into_values().collect();
            subjects.chunks(per).map(|c| c.concat()).collect()
        }
    };
    let folds = groups
        .iter()
        .map(|test| {
            let mut in_test = vec![false; n];
            test.iter().for_each(|&i| in_test[i] = true);
            let mut test = test.clone();
            test.sort_unstable();
            Fold {
                train: (0..n).filter(|&i| !in_test[i]).collect(),
                test,
            }
        })
        .collect();
    Ok(FoldSpec { scheme, folds })
}

/// Produces predictions for a test split after fitting on a training split.
pub trait FoldPredictor: Sync {
    fn fit_predict(
        &self,
        fold: usize,
        train: &[&SignalSample],
        test: &[&SignalSample],
    ) -> Result<Vec<f64>>;
}

/// Predicts the true label. For harness testing.
pub struct OraclePredictor;

impl FoldPredictor for OraclePredictor {
    fn fit_predict(
        &self,
        _: usize,
        _: &[&SignalSample],
        test: &[&SignalSample],
    ) -> Result<Vec<f64>> {
        Ok(test.iter().map(|s| s.step_count as f64).collect())
    }
}

/// Predicts the mean training label.
pub struct MeanPredictor;

impl FoldPredictor for MeanPredictor {
    fn fit_predict(
        &self,
        _: usize,
        train: &[&SignalSample],
        test: &[&SignalSample],
    ) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(Error::Length("empty training split".into()));
        }
        let mean = train.iter().map(|s| s.step_count as f64).sum::<f64>() / train.len() as f64;
        Ok(vec![mean; test.len()])
    }
}

/// Trains a fresh LSTM per fold with identical hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmPredictor {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub input: InputMode,
    pub downsample: usize,
}

impl LstmPredictor {
    pub fn examples(&self, samples: &[&SignalSample]) -> Result<Vec<Example>> {
        samples
            .iter()
            .map(|s| {
                Ok(Example {
                    x: build_input(s, self.input, self.downsample)?.channels,
                    y: s.step_count as f64,
                })
            })
            .collect()
    }

    pub fn fit(&self, train: &[&SignalSample]) -> Result<ModelParams> {
        let data = self.examples(train)?;
        Ok(fit(&self.model, &self.train, &data, None)?.0)
    }
}

impl FoldPredictor for LstmPredictor {
    fn fit_predict(
        &self,
        fold: usize,
        train: &[&SignalSample],
        test: &[&SignalSample],
    ) -> Result<Vec<f64>> {
        log::info!("fold {fold}: training on {} samples", train.len());
        let params = self.fit(train)?;
        predict_all(&params, &self.model, &self.examples(test)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub subject: String,
    pub fold: usize,
    pub true_count: u32,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub scheme: Scheme,
    pub pooled: MetricsReport,
    pub per_fold: Vec<MetricsReport>,
    /// In sample order.
    pub predictions: Vec<SamplePrediction>,
}

/// Runs every fold (in parallel when `jobs > 1`) and pools the test
/// predictions. Fold failures carry the fold index.
pub fn evaluate_cv(
    samples: &[SignalSample],
    folds: &FoldSpec,
    predictor: &dyn FoldPredictor,
    opts: MetricOptions,
    jobs: usize,
) -> Result<CvReport> {
    if folds.folds.len() < 2 {
        return Err(Error::InvalidArgument(
            "cross-validation needs at least 2 folds".into(),
        ));
    }
    let run = |(k, fold): (usize, &Fold)| -> Result<Vec<f64>> {
        let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
        let preds = predictor
            .fit_predict(k, &pick(&fold.train), &pick(&fold.test))
            .map_err(|e| Error::Fold {
                fold: k,
                source: Box::new(e),
            })?;
        if preds.len() != fold.test.len() {
            return Err(Error::Fold {
                fold: k,
                source: Box::new(Error::Length(
                    "predictor returned the wrong number of predictions".into(),
                )),
            });
        }
        Ok(preds)
    };
    let results: Vec<Result<Vec<f64>>> = if jobs > 1 {
        with_pool(jobs, || {
            folds.folds.par_iter().enumerate().map(run).collect()
        })?
    } else {
        folds.folds.iter().enumerate().map(run).collect()
    };

    let mut pooled: Vec<Option<SamplePrediction>> = vec![None; samples.len()];
    let mut per_fold = Vec::with_capacity(results.len());
    for (k, (fold, preds)) in folds.folds.iter().zip(results).enumerate() {
        let preds = preds?;
        let trues: Vec<f64> = fold
            .test
            .iter()
            .map(|&i| samples[i].step_count as f64)
            .collect();
        per_fold.push(compute_metrics(&preds, &trues, opts)?);
        for (&i, &p) in fold.test.iter().zip(&preds) {
            pooled[i] = Some(SamplePrediction {
                id: samples[i].id.clone(),
                subject: samples[i].subject.clone(),
                fold: k,
                true_count: samples[i].step_count,
                pred: p,
            });
        }
    }
    let predictions: Vec<SamplePrediction> = pooled.into_iter().flatten().collect();
    let preds: Vec<f64> = predictions.iter().map(|p| p.pred).collect();
    let trues: Vec<f64> = predictions.iter().map(|p| p.true_count as f64).collect();
    Ok(CvReport {
        scheme: folds.scheme,
        pooled: compute_metrics(&preds, &trues, opts)?,
        per_fold,
        predictions,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Length(format!(
            "spearman of {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let (ma, _) = mean_std(&ra);
    let (mb, _) = mean_std(&rb);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidArgument(
            "spearman of a constant sequence".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// One metric per line. ACC is printed on both scales.
pub fn render_text(label: &str, m: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model: {label}");
    let _ = writeln!(s, "n_samples: {}", m.n_samples);
    let _ = writeln!(s, "mae: {:.4}", m.mae);
    let _ = writeln!(s, "uc: {:.4}", m.uc);
    let _ = writeln!(s, "oc: {:.4}", m.oc);
    let _ = writeln!(s, "er: {:.4} ± {:.4}", m.er_mean, m.er_std);
    let _ = writeln!(s, "rca: {:.4} ± {:.4}", m.rca_mean, m.rca_std);
    let _ = writeln!(s, "acc_percent: {:.4} ± {:.4}", m.acc_mean, m.acc_std);
    let _ = writeln!(
        s,
        "acc_fraction: {:.4} ± {:.4}",
        m.acc_mean / 100.0,
        m.acc_std / 100.0
    );
    s
}

pub const TABLE_HEADER: &str = "model,MAE,UC/OC,ER,RCA,ACC";

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A results-table row: `model,MAE,"UC, OC",ER±std,RCA±std,ACC±std` with
/// ACC as a fraction.
pub fn table_row(label: &str, m: &MetricsReport) -> String {
    [
        label.to_string(),
        format!("{:.2}", m.mae),
        format!("{:.2}, {:.2}", m.uc, m.oc),
        format!("{:.2}±{:.2}", m.er_mean, m.er_std),
        format!("{:.2}±{:.2}", m.rca_mean, m.rca_std),
        format!("{:.2}±{:.2}", m.acc_mean / 100.0, m.acc_std / 100.0),
    ]
    .iter()
    .map(|c| csv_cell(c))
    .collect::<Vec<_>>()
    .join(",")
}

pub fn predictions_csv(preds: &[SamplePrediction]) -> String {
    let mut s = String::from("id,subject,fold,true,pred\n");
    for p in preds {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_cell(&p.id),
            csv_cell(&p.subject),
            p.fold,
            p.true_count,
            p.pred
        );
    }
    s
}
