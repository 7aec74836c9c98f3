//! Minibatch SGD over a [`Network`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::argument("epochs and batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::argument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the whole dataset after the epoch.
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and accuracy over the full dataset, evaluated in fixed order.
pub fn evaluate(network: &Network, data: &Dataset, chunk: usize) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0;
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in order.chunks(chunk.max(1)) {
        let (x, labels) = data.batch(idx)?;
        let batch = network.evaluate(&x, &labels)?;
        total += batch.loss * idx.len() as f64;
        correct += batch.correct;
    }
    let n = data.len() as f64;
    Ok((total / n, correct as f64 / n))
}

/// Trains in place. The returned history starts with the untrained network
/// as epoch 0, followed by one entry per epoch.
pub fn train(network: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if network.classes() != data.classes() {
        return Err(Error::argument(format!(
            "network predicts {} classes, dataset has {}",
            network.classes(),
            data.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let (loss, accuracy) = evaluate(network, data, cfg.batch_size)?;
    history.push(EpochStats {
        epoch: 0,
        loss,
        accuracy,
    });
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(idx)?;
            let (batch, grads) = network.loss_and_grads(&x, &labels)?;
            if !batch.loss.is_finite() {
                return Err(Error::Numeric {
                    step,
                    value: batch.loss,
                });
            }
            network.apply_sgd(&grads, cfg.learning_rate);
            step += 1;
        }
        let (loss, accuracy) = evaluate(network, data, cfg.batch_size)?;
        if !loss.is_finite() {
            return Err(Error::Numeric { step, value: loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.6} accuracy {accuracy:.4}");
        history.push(EpochStats {
            epoch,
            loss,
            accuracy,
        });
    }
    Ok(history)
}
