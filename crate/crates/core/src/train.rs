//! SGD with momentum, cosine learning-rate decay and the epoch loop shared
//! by meta-training and from-scratch training.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Augment, Batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: Augment::None,
        }
    }
}

/// Learning rate at step `t` of `total` under half-cosine decay to zero.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + g + wd * w; w -= lr * v`.
/// Parameters without a gradient are left untouched.
pub fn sgd_step(params: &mut [&mut Tensor], velocity: &mut [Vec<f64>], lr: f64, momentum: f64, weight_decay: f64) {
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        let Some(g) = p.grad.take() else { continue };
        for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = momentum * *vi + gi + weight_decay * *w;
            *w -= lr * *vi;
        }
    }
}

/// Something trained by minibatch SGD.
pub trait Trainable {
    /// Trainable tensors in a fixed order.
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Forward and backward on one batch; leaves gradients on the
    /// parameters and returns the loss.
    fn step_loss(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<f64>;
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Runs `config.epochs` epochs over `data`. All randomness (batch order,
/// augmentation and whatever the model draws in `step_loss`) derives from
/// `seed`.
pub fn fit<M: Trainable>(model: &mut M, data: &Dataset, config: &TrainConfig, seed: u64) -> Result<Vec<EpochLog>> {
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let batches = BatchStream::new(data, config.batch_size, config.augment, derive_seed(seed, 1))?;
    let mut rng = stream(seed, 2);
    let total = config.epochs * batches.batches_per_epoch();
    let mut velocity: Vec<Vec<f64>> = model.params_mut().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut t = 0;
    for epoch in 0..config.epochs {
        let (mut sum, mut count, mut lr) = (0.0, 0, config.lr);
        for (step, batch) in batches.epoch(epoch as u64).enumerate() {
            let loss = model.step_loss(&batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            lr = cosine_lr(config.lr, t, total);
            let mut params = model.params_mut();
            sgd_step(&mut params, &mut velocity, lr, config.momentum, config.weight_decay);
            sum += loss;
            count += 1;
            t += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: sum / count as f64,
            lr,
        });
    }
    Ok(log)
}

/// CSV `epoch,mean_loss,lr`.
pub fn metrics_csv(log: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("writing metrics", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut v = vec![vec![0.5, 0.0]];
        p.grad = Some(vec![0.1, 0.2]);
        sgd_step(&mut [&mut p], &mut v, 0.1, 0.9, 0.01);
        // v = 0.9*0.5 + 0.1 + 0.01*1 = 0.56 ; v = 0 + 0.2 - 0.02 = 0.18
        assert!((v[0][0] - 0.56).abs() < 1e-15 && (v[0][1] - 0.18).abs() < 1e-15);
        assert!((p.data()[0] - 0.944).abs() < 1e-15);
        assert!((p.data()[1] + 2.018).abs() < 1e-15);
        assert!(p.grad.is_none());
    }

    #[test]
    fn metrics_header() {
        let csv = metrics_csv(&[EpochLog { epoch: 0, mean_loss: 1.5, lr: 0.1 }]).unwrap();
        assert_eq!(csv, "epoch,mean_loss,lr\n0,1.5,0.1\n");
    }
}
