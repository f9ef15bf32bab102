use std::fmt::Write as _;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DgdmMode, Model, Params};
use crate::data::Dataset;
use crate::error::{DgdmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("train.learning_rate", self.learning_rate),
            ("train.momentum", self.momentum),
            ("train.weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DgdmError::config(
                    key,
                    "must be a finite non-negative number",
                ));
            }
        }
        if self.epochs == 0 {
            return Err(DgdmError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(DgdmError::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    /// Mean fraction of pixels erased by DGDM drop masks; 0 without DGDM.
    pub dropped_pixels: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// CSV with columns `epoch,mean_loss,train_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,train_acc\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.mean_loss, e.train_acc).expect("string write");
        }
        out
    }
}

/// Independent random streams derived from the training seed.
pub(crate) const STREAM_SHUFFLE: u64 = 1;
pub(crate) const STREAM_DGDM: u64 = 2;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stacks the images of `indices` into one batch.
pub fn stack_images(data: &Dataset, indices: &[usize]) -> Result<Array4<f64>> {
    let first = &data.samples[indices[0]].image;
    let (c, h, w) = first.dim();
    let mut batch = Array4::zeros((indices.len(), c, h, w));
    for (slot, &i) in indices.iter().enumerate() {
        let img = &data.samples[i].image;
        if img.dim() != (c, h, w) {
            return Err(DgdmError::ShapeMismatch {
                expected: vec![c, h, w],
                actual: img.shape().to_vec(),
            });
        }
        batch.index_axis_mut(Axis(0), slot).assign(img);
    }
    Ok(batch)
}

/// Mini-batch SGD with momentum and L2 weight decay on softmax cross-entropy.
///
/// Deterministic given `cfg.seed`: sample order and DGDM decisions come from
/// separate seeded streams.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(DgdmError::EmptyDataset("no training samples".into()));
    }
    let classes = model.spec().num_classes;
    if let Some(s) = data.samples.iter().find(|s| s.label >= classes) {
        return Err(DgdmError::InvalidArgument(format!(
            "label {} out of range for {classes} classes",
            s.label
        )));
    }

    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut dgdm_rng = stream(cfg.seed, STREAM_DGDM);
    let mut velocity = Params::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let (mut dropped_sum, mut dropped_n) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = stack_images(data, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
            let batch = model
                .loss_and_grad(&images, &labels, DgdmMode::Train(&mut dgdm_rng))
                .map_err(|e| match e {
                    DgdmError::NonFinite { .. } => DgdmError::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            if !batch.loss.is_finite() {
                return Err(DgdmError::Diverged {
                    epoch,
                    step,
                    loss: batch.loss,
                });
            }
            for t in &batch.traces {
                dropped_sum += t.dropped_pixel_fraction;
                dropped_n += 1;
            }
            sgd_step(&mut model.params, &mut velocity, &batch.grads, cfg);
            loss_sum += batch.loss * chunk.len() as f64;
            correct += batch.correct;
            seen += chunk.len();
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            dropped_pixels: if dropped_n == 0 {
                0.0
            } else {
                dropped_sum / dropped_n as f64
            },
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} dropped {:.3}",
            entry.mean_loss,
            entry.train_acc,
            entry.dropped_pixels
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

/// `v = momentum * v + (g + wd * p); p -= lr * v`
fn sgd_step(params: &mut Params, velocity: &mut Params, grads: &Params, cfg: &TrainConfig) {
    for ((p, v), g) in params
        .slices_mut()
        .into_iter()
        .zip(velocity.slices_mut())
        .zip(grads.slices())
    {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
            *p -= cfg.learning_rate * *v;
        }
    }
}
