use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, Samples};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            local_epochs: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Model,
    /// Sample-weighted mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on categorical cross-entropy.
///
/// Sample order is reshuffled every epoch from `cfg.seed`; the result depends
/// only on `(model, data, cfg)`.
pub fn train_local(model: &Model, data: &Samples, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    data.check_for(model)?;
    let mut model = model.clone();
    let mut rng = rng::from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);

    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = data.features.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads) = model.loss_and_gradients(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            total += loss * idx.len() as f64;
            if cfg.learning_rate == 0.0 {
                continue;
            }
            for (i, g) in grads.layers.iter().enumerate() {
                let (w, b) = model.params_mut(i);
                for (wi, gi) in w.iter_mut().zip(&g.weights) {
                    *wi -= cfg.learning_rate * gi;
                }
                for (bi, gi) in b.iter_mut().zip(&g.bias) {
                    *bi -= cfg.learning_rate * gi;
                }
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite()
            || model
                .layers()
                .iter()
                .any(|l| l.weights.values().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
        epoch_losses.push(mean);
    }
    Ok(Trained { model, epoch_losses })
}
