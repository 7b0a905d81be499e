//! Joint training of both classifiers with SGD + momentum, evaluation and
//! checkpointing.

pub mod checkpoint;
pub mod sgd;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use sgd::{sgd_step, SgdState, StepSchedule};

use crate::autodiff::{BatchStats, Var};
use crate::calibration::{argmax, scores_and_predictions, CalibrationResult};
use crate::data::{batches, eval_batch, Batch, BatchOptions, Dataset, NormStats, Prefetch};
use crate::error::{Error, Result};
use crate::net::{BaseNetwork, MsNetwork, Parameterized, Session};
use crate::tensor::Tensor;
use checkpoint::{decode_rng, encode_rng, MOMENTUM_PREFIX, NORM_MEAN, NORM_STD};

fn default_epochs() -> usize {
    60
}
fn default_base_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_decay_epochs() -> Vec<usize> {
    vec![30, 45]
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    128
}
fn default_loss_weights() -> (f64, f64) {
    (1.0, 1.0)
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Overrides the experiment seed for training when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// `(w_L, w_H)` multiplying the two cross-entropy terms.
    #[serde(default = "default_loss_weights")]
    pub loss_weights: (f64, f64),
    /// Random crop + horizontal flip on the training split.
    #[serde(default = "default_true")]
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("train.{f}"), m));
        if self.epochs == 0 {
            return err("epochs", "must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return err(
                "lr_decay_factor",
                format!("must be in (0, 1), got {}", self.lr_decay_factor),
            );
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        let (wl, wh) = self.loss_weights;
        if !(wl >= 0.0 && wh >= 0.0 && wl.is_finite() && wh.is_finite()) || wl + wh == 0.0 {
            return err(
                "loss_weights",
                format!("must be non-negative and not both zero, got ({wl}, {wh})"),
            );
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.base_lr,
            decay_epochs: self.lr_decay_epochs.clone(),
            factor: self.lr_decay_factor,
        }
    }
}

/// A network the trainer can optimize and evaluate.
pub trait TrainModel: Parameterized<f32> + Sync {
    /// Training objective on one batch, recorded on `sess`.
    fn batch_loss(&self, sess: &mut Session<f32>, batch: &Batch, loss_weights: (f64, f64)) -> Result<Var>;
    /// Inference logits: `(low head if any, final head)`.
    fn infer(&self, batch: &Batch) -> Result<(Option<Tensor>, Tensor)>;
}

fn weighted_sum(sess: &mut Session<f32>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let v = if w == 1.0 { v } else { sess.tape.scale(v, w as f32)? };
        acc = Some(match acc {
            None => v,
            Some(a) => sess.tape.add(a, v)?,
        });
    }
    acc.ok_or_else(|| Error::config("train.loss_weights", "both weights are zero"))
}

impl TrainModel for MsNetwork<f32> {
    fn batch_loss(&self, sess: &mut Session<f32>, batch: &Batch, (wl, wh): (f64, f64)) -> Result<Var> {
        let xl = sess.tape.constant(batch.x_low.clone());
        let xh = sess.tape.constant(batch.x_high.clone());
        let out = self.record_joint(sess, xl, xh)?;
        let ce_low = sess.tape.softmax_cross_entropy(out.logits_low, &batch.labels)?;
        let ce_high = sess.tape.softmax_cross_entropy(out.logits_high, &batch.labels)?;
        weighted_sum(sess, &[(wl, ce_low), (wh, ce_high)])
    }

    fn infer(&self, batch: &Batch) -> Result<(Option<Tensor>, Tensor)> {
        let (low, feats) = self.forward_low(&batch.x_low)?;
        let high = self.forward_high_given_low(&batch.x_high, &feats)?;
        Ok((Some(low), high))
    }
}

impl TrainModel for BaseNetwork<f32> {
    fn batch_loss(&self, sess: &mut Session<f32>, batch: &Batch, _: (f64, f64)) -> Result<Var> {
        let x = sess.tape.constant(batch.x_high.clone());
        let (logits, _) = self.record(sess, x)?;
        sess.tape.softmax_cross_entropy(logits, &batch.labels)
    }

    fn infer(&self, batch: &Batch) -> Result<(Option<Tensor>, Tensor)> {
        Ok((None, self.forward(&batch.x_high)?.0))
    }
}

/// Loss value, parameter gradients by name and batch-norm statistics of one
/// training-mode pass.
pub struct StepGradients {
    pub loss: f32,
    pub grads: BTreeMap<String, Tensor>,
    pub bn_updates: Vec<(String, BatchStats<f32>)>,
}

pub fn compute_gradients<M: TrainModel>(model: &M, batch: &Batch, loss_weights: (f64, f64)) -> Result<StepGradients> {
    let mut sess = Session::training();
    let loss = model.batch_loss(&mut sess, batch, loss_weights)?;
    let value = sess.tape.value(loss)?.item()?;
    let mut g = sess.tape.backward(loss)?;
    let grads = sess
        .bindings()
        .iter()
        .filter_map(|(name, &v)| g.take(v).map(|t| (name.clone(), t)))
        .collect();
    Ok(StepGradients {
        loss: value,
        grads,
        bn_updates: sess.take_bn_updates(),
    })
}

/// Mutable optimization state carried across epochs and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Draws one shuffle/augmentation seed per epoch.
    pub rng: ChaCha8Rng,
    pub sgd: SgdState<f32>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sgd: SgdState::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "acc_L")]
    pub acc_low: Option<f64>,
    #[serde(rename = "acc_H")]
    pub acc_high: f64,
}

pub fn write_log<W: Write>(w: W, log: &[EpochLog]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["epoch", "lr", "train_loss", "acc_L", "acc_H"])?;
    for e in log {
        csv.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.train_loss.to_string(),
            e.acc_low.map(|a| a.to_string()).unwrap_or_default(),
            e.acc_high.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("train_log", e))?;
    Ok(())
}

pub fn read_log<R: Read>(r: R) -> Result<Vec<EpochLog>> {
    let mut csv = csv::Reader::from_reader(r);
    Ok(csv.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Produce training batches on a separate thread.
    pub prefetch: bool,
    /// Evaluation threads.
    pub threads: usize,
    pub eval_batch_size: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            prefetch: true,
            threads: 1,
            eval_batch_size: 256,
        }
    }
}

/// Trains from `state.epoch` up to (excluding) epoch `end`, evaluating on
/// `eval` after every epoch. `on_epoch` sees the model and state after each
/// epoch (e.g. to checkpoint).
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<M: TrainModel>(
    model: &mut M,
    state: &mut TrainState,
    cfg: &TrainConfig,
    train: &Arc<Dataset>,
    eval: &Dataset,
    norm: &NormStats,
    end: usize,
    opts: &RunOptions,
    mut on_epoch: impl FnMut(&EpochLog, &M, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schedule = cfg.schedule();
    let (momentum, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
    let mut log = Vec::new();
    while state.epoch < end {
        let epoch = state.epoch;
        let lr = schedule.lr_at(epoch);
        let iter = batches(
            train.clone(),
            BatchOptions {
                batch_size: cfg.batch_size,
                shuffle_seed: Some(state.rng.next_u64()),
                augment: cfg.augment,
                norm: Some(norm.clone()),
            },
        )?;
        let iter: Box<dyn Iterator<Item = Result<Batch>>> = if opts.prefetch {
            Box::new(Prefetch::spawn(iter))
        } else {
            Box::new(iter)
        };
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (bi, batch) in iter.enumerate() {
            let batch = batch?;
            let step = compute_gradients(model, &batch, cfg.loss_weights)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            for store in model.param_stores_mut() {
                sgd_step(store, &step.grads, &mut state.sgd, lr as f32, momentum, wd)?;
            }
            model.apply_bn_updates(&step.bn_updates)?;
            loss_sum += step.loss as f64 * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        state.epoch += 1;
        let ev = evaluate(model, eval, norm, opts.eval_batch_size, opts.threads)?;
        let entry = EpochLog {
            epoch: state.epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            acc_low: ev.acc_low,
            acc_high: ev.acc_high,
        };
        on_epoch(&entry, model, state)?;
        log.push(entry);
    }
    Ok(log)
}

/// Full training run from a fresh state.
pub fn train<M: TrainModel>(
    model: &mut M,
    train_set: &Arc<Dataset>,
    eval: &Dataset,
    norm: &NormStats,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    let mut state = TrainState::new(seed);
    train_epochs(
        model,
        &mut state,
        cfg,
        train_set,
        eval,
        norm,
        cfg.epochs,
        &RunOptions::default(),
        |_, _, _| Ok(()),
    )
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub acc_low: Option<f64>,
    pub acc_high: f64,
    /// One record per sample for two-scale models; empty otherwise.
    pub records: Vec<CalibrationResult>,
}

/// Top-1 accuracies and per-image records, with batches sharded over
/// `threads` workers against the read-only model.
pub fn evaluate<M: TrainModel>(
    model: &M,
    data: &Dataset,
    norm: &NormStats,
    batch_size: usize,
    threads: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bs = batch_size.max(1);
    let ranges: Vec<_> = (0..data.len())
        .step_by(bs)
        .map(|s| s..(s + bs).min(data.len()))
        .collect();
    let run = |r: std::ops::Range<usize>| -> Result<Vec<(Option<(f64, usize)>, usize, usize)>> {
        let batch = eval_batch(data, r, Some(norm))?;
        let (low, high) = model.infer(&batch)?;
        let (_, k) = high.dims2()?;
        let low = match low {
            Some(l) => scores_and_predictions(&l)?.into_iter().map(Some).collect(),
            None => vec![None; batch.labels.len()],
        };
        Ok(low
            .into_iter()
            .zip(high.data().chunks(k))
            .zip(&batch.labels)
            .map(|((l, h), &y)| (l, argmax(h), y))
            .collect())
    };
    let threads = threads.clamp(1, ranges.len());
    let rows: Vec<_> = if threads == 1 {
        ranges.into_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = ranges.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .chunks(chunk)
                .map(|rs| s.spawn(|| rs.iter().cloned().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Result<Vec<_>>>()
                .map(|v| v.into_iter().flatten().collect())
        })?
    };
    let rows: Vec<_> = rows.into_iter().flatten().collect();
    let n = rows.len() as f64;
    let acc_high = rows.iter().filter(|r| r.1 == r.2).count() as f64 / n;
    let records: Vec<CalibrationResult> = rows
        .iter()
        .filter_map(|&(l, ph, y)| {
            l.map(|(score, pl)| CalibrationResult {
                score_low: score,
                pred_low: pl,
                pred_high: ph,
                label: y,
            })
        })
        .collect();
    let acc_low = (!records.is_empty())
        .then(|| records.iter().filter(|r| r.low_correct()).count() as f64 / n);
    Ok(Evaluation {
        acc_low,
        acc_high,
        records,
    })
}

/// Snapshot of parameters, running statistics, momentum buffers,
/// normalization statistics and the epoch RNG.
pub fn capture<M: Parameterized<f32>>(model: &M, state: &TrainState, norm: &NormStats) -> Result<Checkpoint> {
    let mut tensors = BTreeMap::new();
    for store in model.param_stores().into_iter().chain(model.buffer_stores()) {
        for (k, v) in store {
            tensors.insert(k.clone(), v.clone());
        }
    }
    for (k, v) in &state.sgd.velocity {
        tensors.insert(format!("{MOMENTUM_PREFIX}{k}"), v.clone());
    }
    let c = norm.mean.len();
    tensors.insert(NORM_MEAN.into(), Tensor::new(vec![c], norm.mean.clone())?);
    tensors.insert(NORM_STD.into(), Tensor::new(vec![c], norm.std.clone())?);
    Ok(Checkpoint {
        spec_hash: model.spec_hash(),
        epoch: state.epoch as u32,
        rng_state: encode_rng(&state.rng),
        tensors,
    })
}

/// Loads `ck` into `model` (which must have the same structure) and returns
/// the training state and normalization statistics stored with it.
pub fn restore<M: Parameterized<f32>>(model: &mut M, ck: &Checkpoint) -> Result<(TrainState, NormStats)> {
    ck.check_hash(model.spec_hash())?;
    let mut remaining = ck.tensors.clone();
    let mut load = |dst: &mut Tensor, name: &str| -> Result<()> {
        let t = remaining
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, network expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    };
    for store in model.param_stores_mut() {
        for (name, dst) in store.iter_mut() {
            load(dst, name)?;
        }
    }
    for store in model.buffer_stores_mut() {
        for (name, dst) in store.iter_mut() {
            load(dst, name)?;
        }
    }
    let take_norm = |m: &mut BTreeMap<String, Tensor>, k: &str| {
        m.remove(k)
            .map(Tensor::into_data)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {k}")))
    };
    let norm = NormStats {
        mean: take_norm(&mut remaining, NORM_MEAN)?,
        std: take_norm(&mut remaining, NORM_STD)?,
    };
    let mut sgd = SgdState::default();
    for (k, v) in remaining {
        let name = k
            .strip_prefix(MOMENTUM_PREFIX)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {k}")))?;
        sgd.velocity.insert(name.to_string(), v);
    }
    Ok((
        TrainState {
            epoch: ck.epoch as usize,
            rng: decode_rng(&ck.rng_state)?,
            sgd,
        },
        norm,
    ))
}
