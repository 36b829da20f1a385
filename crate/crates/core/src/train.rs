//! Mini-batch Adam training on the MAE loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_forward, model_forward, BoundParams, ModelConfig, ModelParams};
use crate::numkern::{Matrix, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// The learning rate is divided by this factor every `lr_step_epochs`.
    pub lr_decay_factor: f64,
    pub lr_step_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Worker threads for the per-sample passes of a batch. Results do not
    /// depend on this value.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 250,
            lr0: 0.001,
            lr_decay_factor: 10.0,
            lr_step_epochs: 75,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.lr_step_epochs == 0 || self.lr_decay_factor <= 0.0 {
            return bad("invalid learning-rate schedule");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return bad("invalid Adam hyper-parameters");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Step schedule `lr0 / factor^floor(epoch / step)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0
            / self
                .lr_decay_factor
                .powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// One preprocessed training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `L x input_size`
    pub x: Matrix,
    pub y: f64,
}

/// Mean absolute error over a batch.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Length(format!(
            "mae of {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

fn sample_pass(
    params: &ModelParams,
    config: &ModelConfig,
    ex: &Example,
    weight: f64,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config.head_activation, true);
    let out = build_forward(&mut tape, &bound, config, &ex.x)?;
    let target = tape.constant(Matrix::scalar(ex.y));
    let diff = tape.sub(out.y, target)?;
    let abs = tape.abs(diff);
    let loss = tape.scale(abs, weight);
    tape.backward(loss)?;
    let value = tape.value(abs).item()?;
    Ok((value, bound.grads(&tape)))
}

/// Batch MAE and its gradient in [`ModelParams::tensors`] order.
///
/// Each sample runs at its own length; per-sample gradients are summed in
/// batch order, so the result does not depend on `jobs`.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[&Example],
    jobs: usize,
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::Length("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<Matrix>)>> = if jobs > 1 && batch.len() > 1 {
        with_pool(jobs, || {
            batch
                .par_iter()
                .map(|ex| sample_pass(params, config, ex, w))
                .collect()
        })?
    } else {
        batch
            .iter()
            .map(|ex| sample_pass(params, config, ex, w))
            .collect()
    };
    let mut loss = 0.0;
    let mut grads: Option<Vec<Matrix>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l * w;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
        }
    }
    Ok((loss, grads.expect("non-empty batch")))
}

pub(crate) fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// First and second moment estimates for every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let p = p.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

fn clip(grads: &mut [Matrix], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            for v in g.as_mut_slice() {
                *v *= k;
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the batch losses.
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last_train_mae(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_mae)
    }
}

/// Batch order of one epoch: a shuffle seeded with `seed ^ epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
    idx
}

/// Predictions for a set of examples.
pub fn predict_all(params: &ModelParams, config: &ModelConfig, xs: &[Example]) -> Result<Vec<f64>> {
    xs.iter()
        .map(|e| Ok(model_forward(params, config, &e.x)?.y))
        .collect()
}

/// Trains a freshly initialized model (init seed = `train.seed`).
pub fn fit(
    config: &ModelConfig,
    train: &TrainConfig,
    data: &[Example],
    validation: Option<&[Example]>,
) -> Result<(ModelParams, TrainHistory)> {
    let params = ModelParams::init(config, train.seed)?;
    fit_from(params, config, train, data, validation)
}

/// Continues training `params`.
pub fn fit_from(
    mut params: ModelParams,
    config: &ModelConfig,
    train: &TrainConfig,
    data: &[Example],
    validation: Option<&[Example]>,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    train.validate()?;
    params.check(config)?;
    if data.is_empty() {
        return Err(Error::Length("training set is empty".into()));
    }
    let mut adam = AdamState::new(&params);
    let mut history = TrainHistory::default();
    for epoch in 0..train.epochs {
        let lr = train.lr_at_epoch(epoch);
        let order = epoch_order(data.len(), train.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(train.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, mut grads) = loss_and_grads(&params, config, &batch, train.jobs)?;
            let finite = loss.is_finite() && grads.iter().all(Matrix::is_finite);
            if !finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            if let Some(c) = train.clip_norm {
                clip(&mut grads, c);
            }
            adam.step(&mut params, &grads, lr, train);
            total += loss;
            batches += 1;
        }
        let val_mae = match validation {
            Some(v) if !v.is_empty() => {
                let pred = predict_all(&params, config, v)?;
                let target: Vec<f64> = v.iter().map(|e| e.y).collect();
                Some(mae_loss(&pred, &target)?)
            }
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_mae: total / batches as f64,
            val_mae,
        };
        log::info!(
            "epoch {:>4} lr {:.2e} train_mae {:.4}{}",
            epoch + 1,
            lr,
            rec.train_mae,
            val_mae
                .map(|v| format!(" val_mae {v:.4}"))
                .unwrap_or_default()
        );
        history.epochs.push(rec);
    }
    Ok((params, history))
}
