//! Shared training-loop types.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping<S> {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    best_state: Option<S>,
    stale: usize,
}

impl<S: Clone> EarlyStopping<S> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best_state: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, state: &S) -> bool {
        if val_loss < self.best_loss || self.best_state.is_none() {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.best_state = Some(state.clone());
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= self.patience
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn into_best(self) -> Option<S> {
        self.best_state
    }
}
