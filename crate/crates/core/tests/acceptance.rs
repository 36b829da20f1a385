//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero when any criterion fails. Dataset-backed criteria report SKIP
//! when their data is not available.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepcount_core::baselines::{count_with, BaselineConfig, BaselineMethod};
use stepcount_core::data::{label_stats, load_dataset, locate_manifest, SignalSample};
use stepcount_core::eval::{
    compute_metrics, evaluate_cv, make_folds, spearman, LstmPredictor, MetricOptions, Scheme,
};
use stepcount_core::export::attention_trace;
use stepcount_core::model::{attention_forward, ModelConfig, ModelParams};
use stepcount_core::numkern::fd_gradient;
use stepcount_core::pipeline::{build_input, synthesize_cohort, CohortSpec, InputMode};
use stepcount_core::train::{fit, loss_and_grads, predict_all, Example, TrainConfig};
use stepcount_core::Matrix;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut min_residual = f64::INFINITY;
    for k in 0..20 {
        let h = [2, 4, 8][rng.random_range(0..3)];
        let layers = rng.random_range(1..=2);
        let len = [1, 5, 12][rng.random_range(0..3)];
        let input = [1, 3, 4][rng.random_range(0..3)];
        let config = ModelConfig::new(input, h, layers, k % 2 == 0);
        let mut params = ModelParams::init(&config, k as u64).unwrap();
        // Spread the weights past the init range so every path carries gradient.
        for t in params.tensors_mut() {
            for v in t.as_mut_slice() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let mut batch: Vec<Example> = (0..3)
            .map(|_| Example {
                x: random_matrix(&mut rng, len, input, 0.0, 1.0),
                y: 0.0,
            })
            .collect();
        let preds = predict_all(&params, &config, &batch).unwrap();
        for (ex, p) in batch.iter_mut().zip(&preds) {
            let off = rng.random_range(0.05..2.0);
            ex.y = if rng.random_bool(0.5) {
                p + off
            } else {
                p - off
            };
            min_residual = min_residual.min(off);
        }

        let refs: Vec<&Example> = batch.iter().collect();
        let (_, analytic) = loss_and_grads(&params, &config, &refs, 1).unwrap();
        let mut tensors: Vec<Matrix> = params.tensors().into_iter().cloned().collect();
        let numeric = fd_gradient(
            |ts| {
                let mut p = params.clone();
                p.assign(ts.to_vec())?;
                let preds = predict_all(&p, &config, &batch)?;
                Ok(preds
                    .iter()
                    .zip(&batch)
                    .map(|(p, e)| (p - e.y).abs())
                    .sum::<f64>()
                    / batch.len() as f64)
            },
            &mut tensors,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            for (x, y) in a.as_slice().iter().zip(n.as_slice()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && min_residual >= 1e-3 && secs < 60.0,
        format!("max rel err {worst:.2e}, min residual {min_residual:.3}, {secs:.1} s"),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1000;
    let trues: Vec<f64> = (0..n).map(|_| rng.random_range(1..200) as f64).collect();
    let preds: Vec<f64> = trues
        .iter()
        .map(|t| t + rng.random_range(-0.5 * t..0.5 * t))
        .collect();
    let m = compute_metrics(&preds, &trues, MetricOptions::default()).unwrap();

    let nf = n as f64;
    let (mut abs, mut er, mut rc, mut ac, mut under, mut over, mut total) =
        (0.0, vec![], vec![], vec![], 0.0, 0.0, 0.0);
    let mut identity_gap = 0.0f64;
    for i in 0..n {
        let (p, t) = (preds[i], trues[i]);
        abs += (p - t).abs();
        let e = 100.0 * (p - t) / t;
        let r = p / t;
        let a = 100.0 * (1.0 - (p - t).abs() / t);
        identity_gap = identity_gap
            .max((r - (1.0 + e / 100.0)).abs())
            .max((a - (100.0 - e.abs())).abs());
        er.push(e);
        rc.push(r);
        ac.push(a);
        if p < t {
            under += t - p;
        } else {
            over += p - t;
        }
        total += t;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / nf;
    let std = |v: &[f64]| {
        let mu = mean(v);
        (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / nf).sqrt()
    };
    let expected = [
        abs / nf,
        mean(&er),
        std(&er),
        mean(&rc),
        std(&rc),
        100.0 * under / total,
        100.0 * over / total,
        mean(&ac),
        std(&ac),
    ];
    let got = [
        m.mae, m.er_mean, m.er_std, m.rca_mean, m.rca_std, m.uc, m.oc, m.acc_mean, m.acc_std,
    ];
    let gap = expected
        .iter()
        .zip(&got)
        .map(|(e, g)| (e - g).abs())
        .fold(0.0, f64::max);
    verdict(
        gap <= 1e-12 && identity_gap <= 1e-12,
        format!("max deviation {gap:.1e}, identity gap {identity_gap:.1e}"),
    )
}

fn attention_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sum_gap, mut range_ok, mut single_ok) = (0.0f64, true, true);
    for k in 0..100 {
        let len = if k % 10 == 0 {
            1
        } else {
            rng.random_range(2..60)
        };
        let h = rng.random_range(1..10);
        let hidden = random_matrix(&mut rng, len, h, -1.0, 1.0);
        let attn = stepcount_core::model::AttentionParams {
            weight: random_matrix(&mut rng, h, h, -2.0, 2.0),
            bias: Some(random_matrix(&mut rng, h, 1, -1.0, 1.0)),
        };
        let out = attention_forward(&hidden, &attn).unwrap();
        sum_gap = sum_gap.max((out.weights.iter().sum::<f64>() - 1.0).abs());
        range_ok &= out.weights.iter().all(|&w| (0.0..=1.0).contains(&w));
        for j in 0..h {
            let col = hidden.column(j);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let c = out.context[j];
            range_ok &= c >= lo - 1e-12 && c <= hi + 1e-12;
        }
        if len == 1 {
            single_ok &= out.weights == [1.0];
        }
    }
    verdict(
        sum_gap <= 1e-12 && range_ok && single_ok,
        format!(
            "simplex gap {sum_gap:.1e}, context in range: {range_ok}, L=1 weight 1: {single_ok}"
        ),
    )
}

/// Shared desk-scale experiment: one attention and one plain model trained
/// identically on 150 noisy synthetic walks and scored on 50 more.
struct Desk {
    test: Vec<SignalSample>,
    test_x: Vec<Example>,
    attention: (ModelConfig, ModelParams, Vec<f64>),
    /// Least-squares slope of the attention model's training loss over the
    /// final 25 epochs.
    late_slope: f64,
    plain_preds: Vec<f64>,
    secs: f64,
}

const DESK_LR: f64 = 0.003;
const DESK_LR_STEP: usize = 40;

fn desk() -> Desk {
    let t0 = Instant::now();
    let walks = synthesize_cohort(7, 200, &CohortSpec::noisy()).unwrap();
    let xs: Vec<Example> = walks
        .iter()
        .map(|s| Example {
            x: build_input(s, InputMode::L2, 1).unwrap().channels,
            y: s.step_count as f64,
        })
        .collect();
    let (train, test_x) = xs.split_at(150);
    let train_config = TrainConfig {
        epochs: 80,
        batch_size: 16,
        lr0: DESK_LR,
        lr_step_epochs: DESK_LR_STEP,
        seed: 1,
        jobs: 1,
        ..TrainConfig::default()
    };
    let run = |attention: bool| {
        let config = ModelConfig::new(1, 32, 2, attention);
        let (params, history) = fit(&config, &train_config, train, None).unwrap();
        let preds = predict_all(&params, &config, test_x).unwrap();
        let late: Vec<f64> = history
            .epochs
            .iter()
            .rev()
            .take(25)
            .rev()
            .map(|e| e.train_mae)
            .collect();
        ((config, params, preds), slope(&late))
    };
    let (attention, late_slope) = run(true);
    let ((_, _, plain_preds), _) = run(false);
    Desk {
        test: walks[150..].to_vec(),
        test_x: test_x.to_vec(),
        attention,
        late_slope,
        plain_preds,
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        sxy += (i as f64 - mx) * (v - my);
        sxx += (i as f64 - mx).powi(2);
    }
    sxy / sxx
}

fn desk_profile(d: &Desk) -> Outcome {
    let trues: Vec<f64> = d.test_x.iter().map(|e| e.y).collect();
    let att = compute_metrics(&d.attention.2, &trues, MetricOptions::default()).unwrap();
    let plain = compute_metrics(&d.plain_preds, &trues, MetricOptions::default()).unwrap();
    verdict(
        att.mae <= 2.5 && att.acc_mean >= 90.0 && att.mae <= plain.mae && d.secs <= 900.0 && d.late_slope <= 0.0,
        format!(
            "attention MAE {:.3} ACC {:.2}, no-attention MAE {:.3}, late train-loss slope {:.4}/epoch, {:.0} s",
            att.mae, att.acc_mean, plain.mae, d.late_slope, d.secs
        ),
    )
}

fn attention_localizes(d: &Desk) -> Outcome {
    let (config, params, _) = &d.attention;
    let mut maxima = Vec::new();
    let mut trues = Vec::new();
    for s in &d.test {
        let series = build_input(s, InputMode::L2, 1).unwrap();
        maxima.push(
            attention_trace(params, config, &series)
                .unwrap()
                .weight_local_maxima() as f64,
        );
        trues.push(s.step_count as f64);
    }
    match spearman(&maxima, &trues) {
        Ok(rho) => verdict(
            rho >= 0.8,
            format!("spearman {rho:.3} over {} walks", trues.len()),
        ),
        Err(e) => Fail(e.to_string()),
    }
}

fn baselines(d: &Desk) -> Outcome {
    let cfg = BaselineConfig::default();
    let mut exact = true;
    for seed in 0..50 {
        let walk = &synthesize_cohort(seed, 1, &CohortSpec::clean()).unwrap()[0];
        let series = build_input(walk, InputMode::L2, 1).unwrap();
        for m in BaselineMethod::ALL {
            exact &= count_with(m, &series, &cfg).unwrap() == walk.step_count;
        }
    }
    let trues: Vec<f64> = d.test.iter().map(|s| s.step_count as f64).collect();
    let model_mae = compute_metrics(&d.attention.2, &trues, MetricOptions::default())
        .unwrap()
        .mae;
    let mut detail = format!("clean exact: {exact}; noisy MAE model {model_mae:.3}");
    let mut worse = true;
    for m in BaselineMethod::ALL {
        let preds: Vec<f64> = d
            .test
            .iter()
            .map(|s| {
                count_with(m, &build_input(s, InputMode::L2, 1).unwrap(), &cfg).unwrap() as f64
            })
            .collect();
        let mae = compute_metrics(&preds, &trues, MetricOptions::default())
            .unwrap()
            .mae;
        worse &= mae > model_mae;
        detail.push_str(&format!(", {m} {mae:.3}"));
    }
    verdict(exact && worse, detail)
}

fn wdsc() -> Option<Vec<SignalSample>> {
    locate_manifest("wdsc").map(|p| load_dataset(&p).expect("wdsc manifest loads"))
}

fn table_one() -> Outcome {
    let Some(samples) = wdsc() else {
        return Skip("wdsc not found under $STEPCOUNT_DATA_DIR".into());
    };
    let s = label_stats(&samples).unwrap();
    let close = |got: f64, want: f64| ((got - want) / want).abs() <= 0.02;
    verdict(
        s.min == 63
            && s.max == 106
            && close(s.mean, 78.0)
            && close(s.std, 8.46)
            && close(s.skew, 0.56),
        format!(
            "min {} max {} mean {:.2} std {:.2} skew {:.3}",
            s.min, s.max, s.mean, s.std, s.skew
        ),
    )
}

fn full_reproduction() -> Outcome {
    if std::env::var_os("STEPCOUNT_FULL_REPRO").is_none() {
        return Skip("set STEPCOUNT_FULL_REPRO=1 to run".into());
    }
    let Some(samples) = wdsc() else {
        return Skip("wdsc not found under $STEPCOUNT_DATA_DIR".into());
    };
    let folds = make_folds(&samples, Scheme::KFold(5), 0).unwrap();
    let factor = ((samples[0].fs_hz / 25.0).round() as usize).max(1);
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mae = |attention: bool| {
        let predictor = LstmPredictor {
            model: ModelConfig::new(1, 128, 2, attention),
            train: TrainConfig::default(),
            input: InputMode::L2,
            downsample: factor,
        };
        evaluate_cv(&samples, &folds, &predictor, MetricOptions::default(), jobs)
            .unwrap()
            .pooled
            .mae
    };
    let (att, plain) = (mae(true), mae(false));
    verdict(
        att <= 4.0 && att < plain,
        format!("attention MAE {att:.3}, no-attention MAE {plain:.3}"),
    )
}

fn main() -> ExitCode {
    // Honour `cargo test -- <filter>` loosely: only a filter of "acceptance"
    // or none runs the suite; other filters skip it entirely.
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }

    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {n} {name}: {tag} ({detail})");
    };
    report(1, "gradient check", gradient_check());
    report(2, "metric oracle", metric_oracle());
    report(3, "attention properties", attention_properties());
    let d = desk();
    report(4, "synthetic desk profile", desk_profile(&d));
    report(5, "attention localizes steps", attention_localizes(&d));
    report(6, "baselines", baselines(&d));
    report(7, "label statistics", table_one());
    report(8, "full wdsc reproduction", full_reproduction());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
