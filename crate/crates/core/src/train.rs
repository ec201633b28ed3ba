//! Mini-batch AdamW training and evaluation over prepared sequences.
//!
//! A batch is a set of sequences. Each sequence runs forward and backward on
//! its own tape (in parallel); sequence `i`'s loss is seeded with
//! `rows_i / rows_batch`, so the summed gradient is that of the mean loss
//! over all valid rows in the batch. Gradients are reduced in batch order.

use std::time::Instant;

use fapnet_autodiff::optim::{AdamW, StepSchedule};
use fapnet_autodiff::{ParamStore, Real, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedSequence;
use crate::error::{Error, Result};
use crate::event::Resolution;
use crate::metrics::{errors, EvalConfig, MetricsReport};
use crate::model::{predict, wmse_loss, ModelConfig, Network, Prediction, RecurrentState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub weight_decay: f64,
    /// Sequences per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub w_x: f64,
    pub w_y: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_milestones: vec![100, 120],
            lr_factor: 0.1,
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 150,
            seed: 0,
            w_x: 1.0,
            w_y: 1.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train: lr {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("train: lr_factor {} must be in (0, 1)", self.lr_factor)));
        }
        if self.weight_decay < 0.0 || self.w_x < 0.0 || self.w_y < 0.0 {
            return Err(Error::Config("train: weight decay and loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule { base_lr: self.lr, milestones: self.lr_milestones.clone(), factor: self.lr_factor }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..AdamW::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub p3: Option<f64>,
    pub p5: Option<f64>,
    pub p10: Option<f64>,
    pub mse: Option<f64>,
    pub mean_distance: Option<f64>,
    pub wall_time_s: f64,
}

impl EpochLog {
    /// The log line without wall time, for reproducibility comparisons.
    pub fn deterministic(&self) -> Self {
        Self { wall_time_s: 0.0, ..self.clone() }
    }
}

pub struct FitOutput {
    pub network: Network,
    pub last: ParamStore<f32>,
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub val_report: Option<MetricsReport>,
}

/// Loss and parameter gradients of one sequence, scaled by `weight`.
fn sequence_grads<F: Real>(
    net: &Network,
    store: &ParamStore<F>,
    seq: &PreparedSequence,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<(f64, Vec<Option<Vec<F>>>)> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, store, &seq.inputs, None)?;
    let loss = wmse_loss(&mut tape, out.pred, &seq.targets, &seq.mask, cfg.w_x, cfg.w_y)?;
    let grads = tape.backward_seeded(loss, F::of(weight));
    Ok((tape.scalar(loss).as_f64(), grads.param_grads(store.len())))
}

/// One optimizer step on `batch`; returns the batch mean loss and valid row count.
pub fn train_step<F: Real>(
    net: &Network,
    store: &mut ParamStore<F>,
    batch: &[&PreparedSequence],
    cfg: &TrainConfig,
    opt: &AdamW,
    lr: f64,
) -> Result<(f64, usize)> {
    let rows: usize = batch.iter().map(|s| s.valid_rows()).sum();
    if rows == 0 {
        return Ok((0.0, 0));
    }
    let results = {
        let frozen: &ParamStore<F> = store;
        batch
            .par_iter()
            .filter(|s| s.valid_rows() > 0)
            .map(|s| sequence_grads(net, frozen, s, cfg, s.valid_rows() as f64 / rows as f64))
            .collect::<Result<Vec<_>>>()?
    };
    store.zero_grad();
    let mut loss = 0.0;
    for ((l, g), s) in results.iter().zip(batch.iter().filter(|s| s.valid_rows() > 0)) {
        loss += l * s.valid_rows() as f64 / rows as f64;
        store.accumulate(g, F::one());
    }
    if !loss.is_finite() {
        return Ok((loss, rows));
    }
    opt.step(store, lr);
    Ok((loss, rows))
}

/// Trains a fresh network, logging each epoch through `on_epoch`.
pub fn fit(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[PreparedSequence],
    val: &[PreparedSequence],
    eval: &EvalConfig,
    sensor: Resolution,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.iter().all(|s| s.valid_rows() == 0) {
        return Err(Error::arg("fit", "training set has no valid samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let net = Network::new(model, &mut store, &mut rng)?;
    let opt = cfg.optimizer();
    let schedule = cfg.schedule();
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut val_report = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut total, mut rows) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, n) = train_step(&net, &mut store, &batch, cfg, &opt, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            total += loss * n as f64;
            rows += n;
        }
        let train_loss = total / rows.max(1) as f64;
        let mut entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss: None,
            p3: None,
            p5: None,
            p10: None,
            mse: None,
            mean_distance: None,
            wall_time_s: 0.0,
        };
        let score = if val.iter().any(|s| s.valid_rows() > 0) {
            let ev = evaluate(&net, &store, val, eval, sensor, false, "val", cfg.w_x, cfg.w_y)?;
            entry.val_loss = Some(ev.loss);
            entry.p3 = ev.report.rate(3.0);
            entry.p5 = ev.report.rate(5.0);
            entry.p10 = ev.report.rate(10.0);
            entry.mse = Some(ev.report.mean_squared_distance);
            entry.mean_distance = Some(ev.report.mean_distance);
            let s = ev.loss;
            if s < best_score {
                val_report = Some(ev.report);
            }
            s
        } else {
            train_loss
        };
        if score < best_score {
            best_score = score;
            best = store.clone();
            best_epoch = epoch;
        }
        entry.wall_time_s = started.elapsed().as_secs_f64();
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(FitOutput { network: net, last: store, best, best_epoch, log, val_report })
}

/// One row of a predicted trajectory, in sensor pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub recording: usize,
    pub t_center_us: f64,
    pub x_pred: f64,
    pub y_pred: f64,
    pub x_label: f64,
    pub y_label: f64,
    pub label_valid: bool,
    pub events: usize,
    pub nominal_events: usize,
}

pub struct Evaluation {
    pub report: MetricsReport,
    /// Mean WMSE over valid rows.
    pub loss: f64,
    pub trajectory: Vec<TrajectoryRow>,
}

fn run_predictions<F: Real>(
    net: &Network,
    store: &ParamStore<F>,
    seqs: &[PreparedSequence],
    carry_state: bool,
) -> Result<Vec<Vec<[f64; 2]>>> {
    if !carry_state {
        return seqs.par_iter().map(|s| predict(net, store, &s.inputs, None).map(|r| r.0)).collect();
    }
    let mut out = Vec::with_capacity(seqs.len());
    let mut state: Option<RecurrentState> = None;
    for (i, s) in seqs.iter().enumerate() {
        if i > 0 && seqs[i - 1].recording != s.recording {
            state = None;
        }
        let (p, st) = predict(net, store, &s.inputs, state.as_ref())?;
        state = st;
        out.push(p);
    }
    Ok(out)
}

fn trajectory_rows(net: &Network, seqs: &[PreparedSequence], preds: &[Vec<[f64; 2]>], sensor: Resolution) -> Vec<TrajectoryRow> {
    let (sw, sh) = (f64::from(sensor.width), f64::from(sensor.height));
    let mut rows = Vec::new();
    for (s, raw) in seqs.iter().zip(preds) {
        let pred = Prediction::new(raw.clone(), sw, sh, net.config.clamp);
        for r in (0..s.inputs.len()).filter(|&r| s.real[r]) {
            rows.push(TrajectoryRow {
                recording: s.recording,
                t_center_us: s.info[r].t_center,
                x_pred: pred.pixels[r][0],
                y_pred: pred.pixels[r][1],
                x_label: s.targets[r][0] * sw,
                y_label: s.targets[r][1] * sh,
                label_valid: s.info[r].label_valid,
                events: s.info[r].events,
                nominal_events: s.info[r].nominal_events,
            });
        }
    }
    rows
}

/// Predicted trajectory over every real (non-padding) sample, labeled or not.
pub fn trajectory<F: Real>(
    net: &Network,
    store: &ParamStore<F>,
    seqs: &[PreparedSequence],
    sensor: Resolution,
    carry_state: bool,
) -> Result<Vec<TrajectoryRow>> {
    let preds = run_predictions(net, store, seqs, carry_state)?;
    Ok(trajectory_rows(net, seqs, &preds, sensor))
}

/// Predicts every sequence and scores the valid rows. With `carry_state`
/// the inter-sample recurrent state flows between consecutive sequences of
/// the same recording.
#[allow(clippy::too_many_arguments)]
/// Averages runs of `factor` consecutive rows of each recording into one
/// row, e.g. five 10 ms predictions into one 50 ms prediction. A trailing
/// partial run is dropped; a pooled label is valid only if all its parts are.
pub fn pool_trajectory(rows: &[TrajectoryRow], factor: usize) -> Vec<TrajectoryRow> {
    assert!(factor > 0, "pooling factor must be positive");
    let mut out = Vec::new();
    for rec in rows.chunk_by(|a, b| a.recording == b.recording) {
        for run in rec.chunks_exact(factor) {
            let mean = |f: fn(&TrajectoryRow) -> f64| run.iter().map(f).sum::<f64>() / factor as f64;
            out.push(TrajectoryRow {
                recording: run[0].recording,
                t_center_us: mean(|r| r.t_center_us),
                x_pred: mean(|r| r.x_pred),
                y_pred: mean(|r| r.y_pred),
                x_label: mean(|r| r.x_label),
                y_label: mean(|r| r.y_label),
                label_valid: run.iter().all(|r| r.label_valid),
                events: run.iter().map(|r| r.events).sum(),
                nominal_events: run.iter().map(|r| r.nominal_events).sum(),
            });
        }
    }
    out
}

pub fn evaluate<F: Real>(
    net: &Network,
    store: &ParamStore<F>,
    seqs: &[PreparedSequence],
    eval: &EvalConfig,
    sensor: Resolution,
    carry_state: bool,
    name: &str,
    w_x: f64,
    w_y: f64,
) -> Result<Evaluation> {
    let preds = run_predictions(net, store, seqs, carry_state)?;
    let mut p_all = Vec::new();
    let mut l_all = Vec::new();
    let mut counts = Vec::new();
    let (mut sx, mut sy) = (0.0, 0.0);
    for (s, raw) in seqs.iter().zip(&preds) {
        let clamped = Prediction::new(raw.clone(), 1.0, 1.0, net.config.clamp).normalized;
        for r in (0..s.inputs.len()).filter(|&r| s.mask[r]) {
            let t = s.targets[r];
            sx += (raw[r][0] - t[0]).powi(2);
            sy += (raw[r][1] - t[1]).powi(2);
            p_all.push(clamped[r]);
            l_all.push(t);
            counts.push(s.info[r].nominal_events);
        }
    }
    if p_all.is_empty() {
        return Err(Error::arg("evaluate", "no valid labeled samples"));
    }
    let n = p_all.len() as f64;
    let errs = errors(&p_all, &l_all, (f64::from(eval.width), f64::from(eval.height)))?;
    let report = MetricsReport::new(name, errs, counts, eval)?;
    let trajectory = trajectory_rows(net, seqs, &preds, sensor);
    Ok(Evaluation { report, loss: w_x * sx / n + w_y * sy / n, trajectory })
}
