use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{evaluate, forward_backward, Model};
use super::optim::{learning_rate, Adam};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch learning-rate decay factor.
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            gamma: 0.95,
            batch_size: 128,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Usage(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Usage(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Usage("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,test_loss,test_accuracy";

/// Renders the training log as CSV with a header line. Floats use Rust's
/// shortest round-trip formatting, so identical runs give identical bytes.
pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.test_loss, r.test_accuracy);
    }
    s
}

/// Labelled samples borrowed from a tile set.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub inputs: &'a [Tensor],
    pub labels: &'a [usize],
}

/// Mini-batch Adam over `train`, evaluating on `test` after every epoch.
/// Batches are drawn from a per-epoch seeded shuffle; `on_epoch` sees each
/// log row as it is produced.
pub fn train(
    model: &mut Model,
    train: Samples<'_>,
    test: Samples<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.inputs.is_empty() || train.inputs.len() != train.labels.len() {
        return Err(Error::Data("training set is empty or mislabelled".into()));
    }
    let sizes: Vec<usize> = model.trainable_blocks().iter().map(|(_, b)| b.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg.lr0, cfg.gamma, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<Tensor> = idx.iter().map(|&i| train.inputs[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let out = forward_backward(model, &xs, &ys)?;
            if !out.loss.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b} (loss = {})",
                    out.loss
                )));
            }
            loss_sum += out.loss * idx.len() as f64;
            let mut params: Vec<&mut [f64]> = model.trainable_blocks_mut().into_iter().map(|(_, p)| p).collect();
            adam.step(&mut params, &out.grads, lr);
        }
        let (test_loss, test_accuracy) = if test.inputs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(model, test.inputs, test.labels)?
        };
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.inputs.len() as f64,
            test_loss,
            test_accuracy,
        };
        on_epoch(&row);
        logs.push(row);
    }
    Ok(logs)
}
