//! Mini-batch SGD with momentum, learning-rate schedules, per-epoch
//! validation and resumable checkpoints.
//!
//! Per-sample augmentation draws from its own generator seeded from the
//! state generator, so the parameter trajectory does not depend on how many
//! threads sample clips.

mod checkpoint;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalfuse::{evaluate, predict_videos, ranked};
use crate::framestore::VideoFrames;
use crate::models::{Network, PathKind};
use crate::motioninput::{clips_to_batch, frames_to_batch, sample_training_clip, ClipSpec};
use crate::neuralcore::{cross_entropy_loss, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    /// Multiply by `factor` at each milestone epoch; the default milestones
    /// are 50% and 75% of the run.
    Step {
        #[serde(default)]
        milestones: Option<Vec<usize>>,
        #[serde(default = "tenth")]
        factor: f64,
    },
    /// Multiply by `factor` after `patience` epochs without a lower
    /// validation loss.
    Plateau {
        patience: usize,
        #[serde(default = "tenth")]
        factor: f64,
    },
}

fn tenth() -> f64 {
    0.1
}

fn default_val_clips() -> usize {
    crate::motioninput::DEFAULT_TEST_CLIPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// Applied to weights only, not to biases or normalization parameters.
    pub weight_decay: f64,
    pub seed: u64,
    /// Test clips per validation video.
    pub val_clips: usize,
    /// Sample training clips on the calling thread only.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            initial_lr: 0.1,
            epochs: 100,
            schedule: LrSchedule::Step {
                milestones: None,
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            val_clips: default_val_clips(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.initial_lr >= 0.0) || !self.initial_lr.is_finite() {
            return fail(format!("initial_lr must be finite and nonnegative, got {}", self.initial_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must lie in [0, 1) and weight_decay be nonnegative".into());
        }
        if self.val_clips == 0 {
            return fail("val_clips must be at least 1".into());
        }
        match &self.schedule {
            LrSchedule::Step { factor, .. } | LrSchedule::Plateau { factor, .. }
                if !(*factor > 0.0 && *factor <= 1.0) =>
            {
                fail(format!("schedule factor must lie in (0, 1], got {factor}"))
            }
            LrSchedule::Step { milestones: Some(m), .. } if m.windows(2).any(|w| w[0] >= w[1]) => {
                fail(format!("milestones must be strictly increasing, got {m:?}"))
            }
            LrSchedule::Plateau { patience: 0, .. } => fail("plateau patience must be at least 1".into()),
            _ => Ok(()),
        }
    }

    /// Explicit milestones, or 50% and 75% of the epoch count (rounded
    /// down, without zero or repeated entries).
    pub fn milestones(&self) -> Vec<usize> {
        match &self.schedule {
            LrSchedule::Step { milestones: Some(m), .. } => m.clone(),
            LrSchedule::Step { milestones: None, .. } => {
                let mut m = vec![self.epochs / 2, self.epochs * 3 / 4];
                m.retain(|&e| e > 0);
                m.dedup();
                m
            }
            LrSchedule::Plateau { .. } => Vec::new(),
        }
    }
}

/// Learning rate for `epoch` given the validation losses of the epochs
/// completed before it.
pub fn apply_lr_schedule(config: &TrainConfig, epoch: usize, val_losses: &[f64]) -> f64 {
    match &config.schedule {
        LrSchedule::Step { factor, .. } => {
            let passed = config.milestones().iter().filter(|&&m| m <= epoch).count();
            config.initial_lr * factor.powi(passed as i32)
        }
        LrSchedule::Plateau { patience, factor } => {
            let mut lr = config.initial_lr;
            let mut best = f64::INFINITY;
            let mut bad = 0;
            for &loss in &val_losses[..epoch.min(val_losses.len())] {
                if loss < best {
                    best = loss;
                    bad = 0;
                } else {
                    bad += 1;
                    if bad == *patience {
                        lr *= factor;
                        bad = 0;
                    }
                }
            }
            lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    /// One velocity tensor per parameter, in [`Network::params`] order.
    pub momentum: Vec<Tensor>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    pub best_val_top1: Option<f64>,
}

/// Generator for weight initialization; data order uses a separate stream.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl TrainState {
    pub fn new(net: &Network, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        TrainState {
            epoch: 0,
            step: 0,
            momentum: net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            rng,
            history: Vec::new(),
            best_val_top1: None,
        }
    }

    /// Validation losses (training losses when there is no validation set)
    /// per completed epoch.
    pub fn monitored_losses(&self) -> Vec<f64> {
        let mut out: Vec<Option<f64>> = vec![None; self.epoch];
        for r in &self.history {
            if r.epoch < self.epoch {
                let slot = &mut out[r.epoch];
                if r.split == Split::Val || slot.is_none() {
                    *slot = Some(r.loss);
                }
            }
        }
        out.into_iter().map(|l| l.unwrap_or(f64::INFINITY)).collect()
    }
}

/// `g += wd * p` (when decayed), `v = mu * v + g`, `p -= lr * v`.
pub fn sgd_update(
    value: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn check_compatible<V: VideoFrames>(net: &Network, data: &[V], spec: &ClipSpec) -> Result<()> {
    spec.validate()?;
    let config = net.config();
    let [c, t, h, w] = config.input_cthw();
    let [st, sh, sw, sc] = spec.clip_shape();
    let t_ok = match config.path {
        PathKind::Motion3d => t == st,
        PathKind::Appearance2d => st == 1,
    };
    if !t_ok || (sc, sh, sw) != (c, h, w) {
        return Err(Error::Config(format!(
            "clips of shape [T={st}, H={sh}, W={sw}, C={sc}] do not fit model input {:?}",
            config.input_shape
        )));
    }
    if let Some(v) = data.iter().find(|v| v.label() >= config.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: v.label(),
            num_classes: config.num_classes,
        });
    }
    Ok(())
}

fn batch_tensor(net: &Network, clips: &[&Tensor]) -> Result<Tensor> {
    match net.config().path {
        PathKind::Motion3d => clips_to_batch(clips.iter().copied()),
        PathKind::Appearance2d => frames_to_batch(clips.iter().copied()),
    }
}

/// One pass over shuffled mini-batches at learning rate `lr`. Advances the
/// state's epoch and step counters and returns the training record.
pub fn train_epoch<V: VideoFrames>(
    net: &mut Network,
    state: &mut TrainState,
    data: &[V],
    spec: &ClipSpec,
    config: &TrainConfig,
    lr: f64,
) -> Result<EpochRecord> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    check_compatible(net, data, spec)?;
    if state.momentum.len() != net.params().len() {
        return Err(Error::InvalidArgument("optimizer state does not match the network".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);

    let (mut loss_sum, mut hit1, mut hit5) = (0.0, 0usize, 0usize);
    for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
        let seeds: Vec<u64> = batch.iter().map(|_| state.rng.random()).collect();
        let sample = |(&i, &seed): (&usize, &u64)| {
            sample_training_clip(&data[i], spec, &mut ChaCha8Rng::seed_from_u64(seed))
        };
        let clips = if config.deterministic {
            batch.iter().zip(&seeds).map(sample).collect::<Result<Vec<_>>>()?
        } else {
            batch.par_iter().zip(&seeds).map(sample).collect::<Result<Vec<_>>>()?
        };
        let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
        let x = batch_tensor(net, &clips.iter().map(|c| &c.data).collect::<Vec<_>>())?;

        let logits = net.forward(&x)?;
        let (loss, dlogits) = cross_entropy_loss(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                step: batch_idx,
                loss,
                videos: clips.iter().map(|c| c.video_id.clone()).collect(),
            });
        }
        net.backward(&dlogits)?;
        for (p, v) in net.params_mut().into_iter().zip(&mut state.momentum) {
            let wd = if p.decay { config.weight_decay } else { 0.0 };
            sgd_update(&mut p.value, &p.grad, v, lr, config.momentum, wd);
        }
        state.step += 1;

        let k = logits.dim(1);
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let order = ranked(row);
            hit1 += (order[0] == label) as usize;
            hit5 += order.iter().take(5).any(|&c| c == label) as usize;
        }
        loss_sum += loss * labels.len() as f64;
    }
    let n = data.len() as f64;
    let record = EpochRecord {
        epoch: state.epoch,
        split: Split::Train,
        loss: loss_sum / n,
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
        lr,
    };
    state.epoch += 1;
    Ok(record)
}

/// Video-level validation: mean negative log of the averaged test-clip
/// probability of the true class, plus top-1/top-5.
pub fn validate<V: VideoFrames>(
    net: &Network,
    data: &[V],
    spec: &ClipSpec,
    num_clips: usize,
) -> Result<(f64, f64, f64)> {
    let preds = predict_videos(net, data, spec, num_clips)?;
    let labels: Vec<(String, usize)> = data.iter().map(|v| (v.id().to_string(), v.label())).collect();
    let report = evaluate(&preds, &labels, net.config().num_classes)?;
    let loss = preds
        .iter()
        .zip(data)
        .map(|(p, v)| -p.probs[v.label()].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / data.len() as f64;
    Ok((loss, report.top1, report.top5))
}

/// Trains one epoch at the scheduled learning rate, then validates when
/// `val` is non-empty. The new records are appended to the state history
/// and returned.
pub fn run_epoch<V: VideoFrames, W: VideoFrames>(
    net: &mut Network,
    state: &mut TrainState,
    train: &[V],
    val: &[W],
    spec: &ClipSpec,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let test_spec = ClipSpec {
        train_augment: false,
        ..spec.clone()
    };
    if !val.is_empty() {
        check_compatible(net, val, &test_spec)?;
    }
    let lr = apply_lr_schedule(config, state.epoch, &state.monitored_losses());
    let epoch = state.epoch;
    let mut records = vec![train_epoch(net, state, train, spec, config, lr)?];
    if !val.is_empty() {
        let (loss, top1, top5) = validate(net, val, &test_spec, config.val_clips)?;
        if state.best_val_top1.is_none_or(|b| top1 > b) {
            state.best_val_top1 = Some(top1);
        }
        records.push(EpochRecord {
            epoch,
            split: Split::Val,
            loss,
            top1,
            top5,
            lr,
        });
    }
    state.history.extend(records.iter().cloned());
    Ok(records)
}

/// Runs [`run_epoch`] until `config.epochs` are complete, calling
/// `on_epoch` with each epoch's records.
pub fn fit<V: VideoFrames, W: VideoFrames>(
    net: &mut Network,
    state: &mut TrainState,
    train: &[V],
    val: &[W],
    spec: &ClipSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Network, &TrainState, &[EpochRecord]) -> Result<()>,
) -> Result<()> {
    while state.epoch < config.epochs {
        let records = run_epoch(net, state, train, val, spec, config)?;
        on_epoch(net, state, &records)?;
    }
    Ok(())
}

/// Appends records as JSON lines.
pub fn write_log_lines(out: &mut impl Write, records: &[EpochRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
