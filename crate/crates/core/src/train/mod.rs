//! Training recipe: augmentation → mixup → label smoothing → BCE, AdamW
//! or LAMB with warmup + half-cosine schedule, DCLS positions clamped
//! after every step.

pub mod config;
pub mod loss;
pub mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use config::{AugmentConfig, TrainConfig, KEYS};
pub use loss::{bce_multilabel, label_smooth, mixup, mixup_with, sigmoid};
pub use optim::{adamw_step, lamb_step, lr_at, optimizer_step, OptimConfig, OptimState, OptimizerKind};

use crate::audio::{self, AudioError, Frontend, FrontendConfig};
use crate::config::ConfigError;
use crate::datasets::{DatasetError, Manifest};
use crate::metrics::{self, ClassAp, EvalBuffer, MetricsError};
use crate::model::{Mode, Model, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("model predicts {model} classes but the dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("history: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Clips of a manifest turned into model inputs. Without waveform
/// augmentations the spectrograms are computed once up front.
pub struct SpectrogramDataset {
    pub manifest: Manifest,
    frontend: Frontend,
    clip_len: usize,
    clips: Vec<audio::AudioClip>,
    cache: Option<Vec<Tensor<f32>>>,
}

impl SpectrogramDataset {
    /// Loads every clip (and precomputes spectrograms unless `waveform_aug`).
    pub fn load(manifest: Manifest, frontend: FrontendConfig, clip_seconds: f64, resample: bool, waveform_aug: bool) -> Result<Self> {
        let frontend = Frontend::new(frontend)?;
        let clip_len = (clip_seconds * frontend.cfg.sample_rate as f64).round() as usize;
        let clips = manifest
            .entries
            .par_iter()
            .map(|e| manifest.load_clip(e, frontend.cfg.sample_rate, resample).map(|c| audio::pad_or_truncate(&c, clip_len)))
            .collect::<Result<Vec<_>, DatasetError>>()?;
        let mut ds = Self { manifest, frontend, clip_len, clips, cache: None };
        if !waveform_aug {
            let cache = ds.clips.par_iter().map(|c| ds.frontend.logmel(c)).collect::<Result<Vec<_>, AudioError>>()?;
            ds.cache = Some(cache);
            ds.clips = Vec::new();
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn frontend(&self) -> &FrontendConfig {
        &self.frontend.cfg
    }

    /// Un-augmented spectrogram of item `i`.
    pub fn spectrogram(&self, i: usize) -> Result<Tensor<f32>> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => Ok(self.frontend.logmel(&self.clips[i])?),
        }
    }

    /// Spectrogram of item `i` with the training augmentations applied.
    pub fn augmented(&self, i: usize, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let spec = match &self.cache {
            Some(c) => c[i].clone(),
            None => {
                let mut clip = self.clips[i].clone();
                if aug.random_roll {
                    clip = audio::augment_random_roll(&clip, rng);
                }
                if aug.speed_p > 0.0 {
                    clip = audio::augment_speed(&clip, aug.speed_p, aug.speed_rates, rng);
                    clip = audio::pad_or_truncate(&clip, self.clip_len);
                }
                self.frontend.logmel(&clip)?
            }
        };
        Ok(if aug.erasing.p > 0.0 { audio::augment_erase(&spec, &aug.erasing, rng) } else { spec })
    }

    pub fn target(&self, i: usize) -> Vec<f32> {
        self.manifest.target(&self.manifest.entries[i])
    }
}

/// Concatenates 1×F×T items into N×1×F×T.
pub fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or(TrainError::EmptyDataset)?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(TrainError::Invalid(format!("batch items differ in shape: {:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub map: f64,
}

pub fn write_history<W: Write>(out: W, history: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "step", "lr", "loss", "mAP"]).map_err(std::io::Error::from)?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.step.to_string(), format!("{:.9e}", r.lr), format!("{:.9}", r.loss), format!("{:.6}", r.map)])
            .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Eval-mode scores for every item.
pub fn evaluate(model: &Model<f32>, data: &SpectrogramDataset, batch_size: usize) -> Result<(Vec<ClassAp>, f64)> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.spec.num_classes != data.num_classes() {
        return Err(TrainError::ClassMismatch { model: model.spec.num_classes, data: data.num_classes() });
    }
    let classes = data.num_classes();
    let mut buf = EvalBuffer::new(classes);
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(data.len())).collect();
        let items = idx.iter().map(|&i| data.spectrogram(i)).collect::<Result<Vec<_>>>()?;
        let logits = model.predict(&stack(&items)?)?;
        for (row, &i) in logits.data().chunks(classes).zip(&idx) {
            let scores: Vec<f64> = row.iter().map(|&z| sigmoid(z as f64)).collect();
            let labels: Vec<bool> = data.target(i).iter().map(|&t| t > 0.5).collect();
            buf.push(&scores, &labels)?;
        }
    }
    let per_class = buf.per_class()?;
    let map = metrics::map_of(&per_class)?;
    Ok((per_class, map))
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<TrainRecord>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const BATCH_STREAM: u64 = 1 << 63;

/// Runs `cfg.epochs` epochs. Every random draw comes from a ChaCha stream
/// derived from `seed` and the (epoch, item) or (epoch, batch) index, so
/// the run is reproducible. `eval` defaults to the un-augmented training
/// set for the per-epoch mAP.
pub fn train_loop(
    mut model: Model<f32>,
    train: &SpectrogramDataset,
    eval: Option<&SpectrogramDataset>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.spec.num_classes != train.num_classes() {
        return Err(TrainError::ClassMismatch { model: model.spec.num_classes, data: train.num_classes() });
    }
    model.set_drop_path_rate(cfg.drop_path);
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, history });
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut state = OptimState::new(&model.params);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(seed, BATCH_STREAM | ((epoch as u64) << 32) | 0xFFFF_FFFF));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let epoch_bits = (epoch as u64) << 32;
            let items = idx
                .iter()
                .map(|&i| train.augmented(i, &cfg.augment, &mut stream_rng(seed, epoch_bits | i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let x = stack(&items)?;
            let y_rows: Vec<f32> = idx.iter().flat_map(|&i| train.target(i)).collect();
            let y = Tensor::new([idx.len(), train.num_classes()], y_rows)?;
            let mut batch_rng = stream_rng(seed, BATCH_STREAM | epoch_bits | b as u64);
            let (x, y, _) = mixup(&x, &y, cfg.mixup_alpha, &mut batch_rng)?;
            let y = label_smooth(&y, cfg.label_smoothing);
            let (logits, cache) = model.forward(&x, Mode::Train, &mut batch_rng)?;
            let (loss, grad) = bce_multilabel(&logits, &y).map_err(|e| match e {
                TensorError::NonFinite { .. } => TrainError::NonFiniteLoss { epoch, step: step + 1, loss: f64::NAN },
                other => other.into(),
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: step + 1, loss });
            }
            let grads = model.backward(&cache, &grad)?;
            step += 1;
            lr = lr_at(step, total, warmup, cfg.base_lr);
            optimizer_step(cfg.optimizer, &mut model.params, &grads, &mut state, lr, &cfg.optim)?;
            loss_sum += loss * idx.len() as f64;
        }
        let (_, map) = evaluate(&model, eval.unwrap_or(train), cfg.eval_batch_size)?;
        let record = TrainRecord { epoch: epoch + 1, step, lr, loss: loss_sum / train.len() as f64, map };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}
