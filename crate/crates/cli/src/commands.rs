use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use stepcount_core::baselines::{
    count_autocorrelation, count_with, BaselineConfig, BaselineMethod,
};
use stepcount_core::checkpoint::{Checkpoint, Preprocess};
use stepcount_core::data::{
    check_published, convert_raw, label_stats, load_dataset, locate_manifest, save_dataset,
    SignalSample, DATA_DIR_ENV, MANIFEST_FILE,
};
use stepcount_core::eval::{
    compute_metrics, evaluate_cv, make_folds, predictions_csv, render_text, table_row,
    LstmPredictor, MetricOptions, MetricsReport, SamplePrediction, UcOcMode, TABLE_HEADER,
};
use stepcount_core::export::{attention_trace, write_attention_csv};
use stepcount_core::model::ModelConfig;
use stepcount_core::pipeline::{build_input, synthesize_cohort, CohortSpec, InputMode};
use stepcount_core::train::{fit, predict_all, TrainConfig};

use crate::output::Outputs;
use crate::{
    parse_methods, BaselineArgs, Command, ConvertArgs, CrossvalArgs, EvalArgs, ExportArgs, Family,
    MetricArgs, ModelArgs, StatsArgs, SynthArgs, TrainArgs, TrainCmdArgs,
};

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Failure::Usage(msg.into()))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Stats(a) => stats(a),
        Command::Convert(a) => convert(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Crossval(a) => crossval(a),
        Command::Baseline(a) => baseline(a),
        Command::ExportAttention(a) => export_attention(a),
    }
}

/// A manifest file, a directory holding one, or a name under the data root.
fn resolve_dataset(arg: &str) -> anyhow::Result<PathBuf> {
    let p = Path::new(arg);
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    if p.join(MANIFEST_FILE).is_file() {
        return Ok(p.join(MANIFEST_FILE));
    }
    locate_manifest(arg).ok_or_else(|| {
        anyhow!("dataset '{arg}' not found (pass a manifest path or set {DATA_DIR_ENV} to a directory containing {arg}/{MANIFEST_FILE})")
    })
}

fn load(arg: &str) -> anyhow::Result<Vec<SignalSample>> {
    let path = resolve_dataset(arg)?;
    let samples = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    if samples.is_empty() {
        bail!("{} lists no samples", path.display());
    }
    log::info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(samples)
}

/// `auto` picks the integer factor closest to bringing the rate to 25 Hz.
fn downsample_factor(arg: &str, samples: &[SignalSample]) -> Result<usize> {
    if arg == "auto" {
        let fs = samples[0].fs_hz;
        if samples.iter().any(|s| s.fs_hz != fs) {
            return usage(
                "--downsample auto needs a single sampling rate; pass an explicit factor",
            );
        }
        return Ok(((fs / 25.0).round() as usize).max(1));
    }
    match arg.parse::<usize>() {
        Ok(f) if f >= 1 => Ok(f),
        _ => usage(format!(
            "invalid --downsample '{arg}' (expected a positive integer or auto)"
        )),
    }
}

fn model_config(m: &ModelArgs) -> Result<ModelConfig> {
    let cfg = ModelConfig::new(m.input.channels(), m.hidden, m.layers, !m.no_attention);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(t: &TrainArgs) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch,
        lr0: t.lr,
        lr_step_epochs: t.lr_step,
        seed: t.seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn metric_options(m: &MetricArgs) -> MetricOptions {
    MetricOptions {
        uc_oc: if m.uc_oc_by_samples {
            UcOcMode::SampleCount
        } else {
            UcOcMode::StepNormalized
        },
        round_predictions: m.round,
    }
}

fn model_label(cfg: &ModelConfig, input: InputMode) -> String {
    let kind = if cfg.use_attention {
        "attention"
    } else {
        "no attention"
    };
    format!(
        "LSTM-{}x{}-{input} ({kind})",
        cfg.num_layers, cfg.hidden_size
    )
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match a.family {
        Family::Noisy => CohortSpec::noisy(),
        Family::Clean => CohortSpec::clean(),
    };
    let samples = synthesize_cohort(a.seed, a.n, &spec)?;
    let mut out = Outputs::default();
    out.dir(&a.out)?;
    let manifest = save_dataset(&a.out, &a.name, &samples)?;
    out.commit();
    println!("wrote {} walks to {}", samples.len(), manifest.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let samples = load(&a.dataset)?;
    let s = label_stats(&samples)?;
    println!("n: {}", s.n);
    println!("min: {}", s.min);
    println!("max: {}", s.max);
    println!("mean: {:.2}", s.mean);
    println!("std: {:.2}", s.std);
    println!("skew: {:.2}", s.skew);
    let name = resolve_dataset(&a.dataset)
        .ok()
        .and_then(|p| stepcount_core::data::Manifest::read(&p).ok())
        .map(|m| m.dataset)
        .unwrap_or_default();
    for c in check_published(&name, &samples)? {
        println!(
            "published {}: {} (min {}, max {}, mean {:+.2}%, std {:+.2}%, skew {:+.2}%)",
            c.reference,
            if c.passed { "match" } else { "MISMATCH" },
            if c.min_ok { "ok" } else { "differs" },
            if c.max_ok { "ok" } else { "differs" },
            c.mean_rel_err * 100.0,
            c.std_rel_err * 100.0,
            c.skew_rel_err * 100.0
        );
    }
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let mut out = Outputs::default();
    out.dir(&a.out)?;
    let res = convert_raw(&a.name, &a.source, &a.out)?;
    out.commit();
    println!(
        "wrote {} samples to {}",
        res.manifest.records.len(),
        res.manifest_path.display()
    );
    for c in &res.checks {
        println!(
            "published {}: {}",
            c.reference,
            if c.passed { "match" } else { "MISMATCH" }
        );
    }
    Ok(())
}

fn train(a: TrainCmdArgs) -> Result<()> {
    let model = model_config(&a.model)?;
    let tc = train_config(&a.train)?;
    let samples = load(&a.dataset)?;
    let downsample = downsample_factor(&a.model.downsample, &samples)?;
    let predictor = LstmPredictor {
        model: model.clone(),
        train: tc.clone(),
        input: a.model.input,
        downsample,
    };
    let refs: Vec<&SignalSample> = samples.iter().collect();
    let data = predictor.examples(&refs)?;
    let started = Instant::now();
    let (params, history) = fit(&model, &tc, &data, None)?;
    let ck = Checkpoint {
        model_config: model,
        train_config: tc.clone(),
        preprocess: Preprocess {
            input: a.model.input,
            downsample,
        },
        seed: tc.seed,
        epoch: history.epochs.len(),
        params,
    };
    let mut out = Outputs::default();
    out.write(&a.out, ck.to_bytes()?)?;
    out.commit();
    println!(
        "trained {} epochs in {:.1}s, final train MAE {:.4}; checkpoint {}",
        history.epochs.len(),
        started.elapsed().as_secs_f64(),
        history.last_train_mae().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    dataset: &'a str,
    scheme: String,
    input: InputMode,
    model: String,
    metrics: MetricsReport,
    per_fold: Vec<MetricsReport>,
    predictions: &'a [SamplePrediction],
    wall_time_s: f64,
}

impl RunReport<'_> {
    fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset: {}", self.dataset);
        let _ = writeln!(s, "scheme: {}", self.scheme);
        let _ = writeln!(s, "input: {}", self.input);
        s.push_str(&render_text(&self.model, &self.metrics));
        for (k, m) in self.per_fold.iter().enumerate() {
            let _ = writeln!(s, "fold {k}: n {} mae {:.4}", m.n_samples, m.mae);
        }
        let _ = writeln!(s, "wall_time_s: {:.1}", self.wall_time_s);
        s
    }

    fn write(&self, dir: &Path, out: &mut Outputs) -> anyhow::Result<()> {
        out.dir(dir)?;
        out.write(&dir.join("report.txt"), self.text())?;
        out.write(
            &dir.join("report.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        out.write(
            &dir.join("table.csv"),
            format!(
                "{TABLE_HEADER}\n{}\n",
                table_row(&self.model, &self.metrics)
            ),
        )?;
        out.write(
            &dir.join("predictions.csv"),
            predictions_csv(self.predictions),
        )?;
        Ok(())
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let samples = load(&a.dataset)?;
    let started = Instant::now();
    let predictor = LstmPredictor {
        model: ck.model_config.clone(),
        train: ck.train_config.clone(),
        input: ck.preprocess.input,
        downsample: ck.preprocess.downsample,
    };
    let refs: Vec<&SignalSample> = samples.iter().collect();
    let preds = predict_all(&ck.params, &ck.model_config, &predictor.examples(&refs)?)?;
    let predictions: Vec<SamplePrediction> = samples
        .iter()
        .zip(&preds)
        .map(|(s, &p)| SamplePrediction {
            id: s.id.clone(),
            subject: s.subject.clone(),
            fold: 0,
            true_count: s.step_count,
            pred: p,
        })
        .collect();
    let trues: Vec<f64> = samples.iter().map(|s| s.step_count as f64).collect();
    let report = RunReport {
        dataset: &a.dataset,
        scheme: "holdout".into(),
        input: ck.preprocess.input,
        model: model_label(&ck.model_config, ck.preprocess.input),
        metrics: compute_metrics(&preds, &trues, metric_options(&a.metrics))?,
        per_fold: Vec::new(),
        predictions: &predictions,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mut out = Outputs::default();
    report.write(&a.out, &mut out)?;
    out.commit();
    print!("{}", render_text(&report.model, &report.metrics));
    Ok(())
}

fn crossval(a: CrossvalArgs) -> Result<()> {
    let model = model_config(&a.model)?;
    let tc = train_config(&a.train)?;
    if a.jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    let samples = load(&a.dataset)?;
    let downsample = downsample_factor(&a.model.downsample, &samples)?;
    let folds = make_folds(&samples, a.scheme, tc.seed)?;
    log::info!(
        "{} folds ({}), downsample x{downsample}",
        folds.folds.len(),
        a.scheme
    );
    let predictor = LstmPredictor {
        model: model.clone(),
        train: tc,
        input: a.model.input,
        downsample,
    };
    let started = Instant::now();
    let cv = evaluate_cv(
        &samples,
        &folds,
        &predictor,
        metric_options(&a.metrics),
        a.jobs,
    )?;
    let report = RunReport {
        dataset: &a.dataset,
        scheme: a.scheme.to_string(),
        input: a.model.input,
        model: model_label(&model, a.model.input),
        metrics: cv.pooled,
        per_fold: cv.per_fold.clone(),
        predictions: &cv.predictions,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mut out = Outputs::default();
    report.write(&a.out, &mut out)?;
    out.commit();
    println!(
        "{TABLE_HEADER}\n{}",
        table_row(&report.model, &report.metrics)
    );
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let methods = parse_methods(&a.method).map_err(Failure::Usage)?;
    let cfg = BaselineConfig {
        smooth_window_s: a.smooth_window,
        peak_min_prominence_k: a.k,
        min_step_interval_s: a.min_interval,
        cadence_band_hz: (a.band_lo, a.band_hi),
    };
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let samples = load(&a.dataset)?;
    let downsample = downsample_factor(&a.downsample, &samples)?;
    let inputs = samples
        .iter()
        .map(|s| build_input(s, InputMode::L2, downsample))
        .collect::<stepcount_core::Result<Vec<_>>>()?;
    let trues: Vec<f64> = samples.iter().map(|s| s.step_count as f64).collect();
    let mut table = format!("{TABLE_HEADER}\n");
    let mut per_sample = String::from("id,true,method,count,low_confidence\n");
    for m in methods {
        let mut counts = Vec::with_capacity(samples.len());
        for (s, x) in samples.iter().zip(&inputs) {
            let (count, low) = match m {
                BaselineMethod::Autocorr => {
                    let r = count_autocorrelation(x, &cfg)
                        .with_context(|| format!("sample {}", s.id))?;
                    (r.count, r.low_confidence)
                }
                _ => (
                    count_with(m, x, &cfg).with_context(|| format!("sample {}", s.id))?,
                    false,
                ),
            };
            let _ = writeln!(per_sample, "{},{},{m},{count},{low}", s.id, s.step_count);
            counts.push(count as f64);
        }
        let metrics = compute_metrics(&counts, &trues, metric_options(&a.metrics))?;
        print!("{}", render_text(&m.to_string(), &metrics));
        let _ = writeln!(table, "{}", table_row(&m.to_string(), &metrics));
    }
    let mut out = Outputs::default();
    out.dir(&a.out)?;
    out.write(&a.out.join("table.csv"), table)?;
    out.write(&a.out.join("predictions.csv"), per_sample)?;
    out.commit();
    Ok(())
}

fn export_attention(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if !ck.model_config.use_attention {
        return usage("checkpoint has no attention layer");
    }
    let samples = load(&a.dataset)?;
    let sample = samples
        .iter()
        .find(|s| s.id == a.sample)
        .ok_or_else(|| anyhow!("sample '{}' not found in {}", a.sample, a.dataset))?;
    let x = build_input(sample, ck.preprocess.input, ck.preprocess.downsample)?;
    let trace = attention_trace(&ck.params, &ck.model_config, &x)?;
    let mut out = Outputs::default();
    out.claim(&a.out)?;
    write_attention_csv(&a.out, &trace)?;
    out.commit();
    println!(
        "wrote {} rows to {} ({} local maxima in the weights, label {})",
        trace.len(),
        a.out.display(),
        trace.weight_local_maxima(),
        sample.step_count
    );
    Ok(())
}
