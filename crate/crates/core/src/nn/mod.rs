//! Dense multi-branch network: forward pass, back-propagation, SGD.

mod forward;
mod model;
mod tensor;
mod train;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use forward::{Gradients, LayerGrad};
pub use model::{Activation, Architecture, DenseLayer, Model, Submodel, GPS_WIDTH};
pub use tensor::Tensor;
pub use train::{train_local, TrainConfig, Trained};

use crate::error::{Error, Result};

/// Feature rows with their sector labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    /// `S × D`, one sample per row.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Tensor("features must be a matrix".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Tensor(alloc::format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn concat(parts: &[&Samples]) -> Result<Self> {
        let feats: Vec<&Tensor> = parts.iter().map(|p| &p.features).collect();
        let features = Tensor::vstack(&feats)?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(features, labels)
    }

    pub(crate) fn check_for(&self, model: &Model) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= model.n_sectors()) {
            return Err(Error::Shape {
                layer: model.output_layer().name.clone(),
                expected: model.n_sectors(),
                found: bad,
            });
        }
        Ok(())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Whether the top-1 sector matched the label, per sample.
    pub correct: Vec<bool>,
}

/// Predicted sector per row.
pub fn predict(model: &Model, batch: &Tensor) -> Result<Vec<usize>> {
    let probs = model.forward(batch)?;
    Ok((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Samples) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let pred = predict(model, &data.features)?;
    let correct: Vec<bool> = pred.iter().zip(&data.labels).map(|(p, y)| p == y).collect();
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(Evaluation {
        accuracy: hits as f64 / data.len() as f64,
        correct,
    })
}

/// Best sector `t*` for a single sample.
pub fn predict_sector(model: &Model, sample: &[f64]) -> Result<usize> {
    let x = Tensor::matrix(1, sample.len(), sample.to_vec())?;
    Ok(predict(model, &x)?[0])
}
