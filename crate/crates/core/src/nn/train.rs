//! Minibatch training with per-epoch validation and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Batch, DenseModel, OptState};
use crate::error::{Error, Result};
use crate::pruning::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Validation MSE after each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Splits `0..n` (already shuffled) into minibatches; a trailing batch of one
/// row is merged into its predecessor so batchnorm never sees a single row.
fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut chunks: Vec<&[usize]> = order.chunks(batch_size).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        chunks.pop();
        let start = (chunks.len() - 1) * batch_size;
        *chunks.last_mut().expect("at least one chunk") = &order[start..];
    }
    chunks
}

/// Trains in place. Masked weights stay exactly zero throughout.
pub fn train_epochs<R: Rng + ?Sized>(
    model: &mut DenseModel,
    opt: &mut OptState,
    mask: &Mask,
    train: &Batch,
    val: &Batch,
    settings: TrainSettings,
    rng: &mut R,
) -> Result<TrainReport> {
    if settings.epochs == 0 {
        return Err(Error::Precondition("epochs must be at least 1".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Precondition("batch size must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    mask.check_aligned(model)?;
    mask.apply_to(model.params_mut());

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        for idx in minibatches(&order, settings.batch_size) {
            let batch = train.select(idx);
            let (_, grad, stats) = model.loss_and_gradient(&batch, mask)?;
            model.update_running_stats(&stats);
            opt.step(model, &grad, mask)?;
        }
        let loss = model.evaluate_mse(val)?;
        report.epoch_losses.push(loss);
        if loss < best {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if settings.patience.is_some_and(|p| since_best >= p) {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trailing_row_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = minibatches(&order, 4);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = minibatches(&order[..8], 4);
        assert_eq!(b.len(), 2);
        let b = minibatches(&order[..1], 4);
        assert_eq!(b.len(), 1);
    }
}
