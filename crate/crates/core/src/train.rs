//! Supervised cross-entropy training shared by the original model, the
//! retrain baseline and fine-tuning relearning.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AccessLog, ForgetSpec, Split};
use crate::divergence::log_softmax;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::optim::{self, OptimizerKind};
use crate::params::ParamSet;
use crate::seeds::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// Mean cross-entropy over a batch and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let ls = log_softmax(row.as_slice().expect("standard layout"));
        total -= ls[y];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = ls[k].exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    (total / n, grad)
}

/// Gradient of the mean cross-entropy with respect to all parameters.
pub fn cross_entropy_grad(model: &Classifier, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, ParamSet)> {
    let pass = model.forward_train(x)?;
    let (loss, d_logits) = cross_entropy(pass.logits.view(), labels);
    let (grads, _) = model.backward(&pass, d_logits.view(), None);
    Ok((loss, grads))
}

/// Shuffled mini-batches over `indices`, deterministic in `seed` and `epoch`.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Shuffle, epoch as u64, 0));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub access: AccessLog,
}

/// Cross-entropy training on the given training rows. Every read goes through
/// `AccessLog`, so the caller can prove which part of the data was consumed.
pub fn train_supervised(
    model: &Classifier,
    train: &Split,
    forget: &ForgetSpec,
    indices: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, TrainLog)> {
    cfg.validate()?;
    let mut params = model.params().clone();
    let mut current = model.clone();
    let mut opt = optim::build(cfg.optimizer, cfg.learning_rate, &params);
    let mut log = TrainLog::default();
    if cfg.epochs > 0 && indices.is_empty() {
        return Err(Error::EmptyData("training indices"));
    }
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, batch) in epoch_batches(indices, cfg.batch_size, seed, epoch)
            .into_iter()
            .enumerate()
        {
            let data = log.access.gather(train, forget, &batch);
            let (loss, grads) = cross_entropy_grad(&current, data.x.view(), &data.y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value: loss,
                    epoch,
                    step,
                });
            }
            opt.step(&mut params, &grads);
            current = current.with_params(params.clone())?;
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        log.epoch_loss.push(sum / count.max(1) as f64);
    }
    Ok((current, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cross_entropy_matches_definition() {
        let z = arr2(&[[1.0, 2.0, 0.5]]);
        let (loss, grad) = cross_entropy(z.view(), &[0]);
        let expected = -log_softmax(&[1.0, 2.0, 0.5])[0];
        assert!((loss - expected).abs() < 1e-12);
        assert!((grad.sum()).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let idx: Vec<usize> = (0..103).collect();
        let batches = epoch_batches(&idx, 10, 4, 2);
        assert_eq!(batches.len(), 11);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        assert_eq!(batches, epoch_batches(&idx, 10, 4, 2));
        assert_ne!(batches, epoch_batches(&idx, 10, 4, 3));
    }
}
