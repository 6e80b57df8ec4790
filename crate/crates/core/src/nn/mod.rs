//! Minimal trainable network: 1-D convolutional feature extractors feeding a
//! fully connected regressor, with exact gradients and masked Adam updates.

mod layers;
mod model;
mod optim;
mod train;

use ndarray::{Array1, Array2, Axis};

pub use layers::{Architecture, InputGroup, LayerSpec, ModelConfig};
pub use model::{loss_rmse, mse, BatchStats, BnStats, DenseModel, BN_EPS, BN_MOMENTUM};
pub use optim::{adam_step, OptState, OptimizerConfig};
pub use train::{train_epochs, TrainReport, TrainSettings};

use crate::error::{Error, Result};

/// Feature rows and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
}

impl Batch {
    pub fn new(features: Array2<f64>, targets: Array1<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("batch contains non-finite values".into()));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Rows at `idx`, in that order (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch { features: self.features.select(Axis(0), idx), targets: self.targets.select(Axis(0), idx) }
    }

    /// Concatenates batches row-wise.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let feats: Vec<_> = parts.iter().map(|b| b.features.view()).collect();
        let targs: Vec<_> = parts.iter().map(|b| b.targets.view()).collect();
        let features = ndarray::concatenate(Axis(0), &feats).map_err(|e| Error::Shape(e.to_string()))?;
        let targets = ndarray::concatenate(Axis(0), &targs).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Batch { features, targets })
    }
}
