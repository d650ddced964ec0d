//! Mini-batch Adam with early stopping on a validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{adam_update, AdamState, Gradients, ParameterSet};
use crate::{Error, Result};

/// Optimization knobs shared by every model.
///
/// `n_samples` and `validation_points` only affect the energy-based model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Monte Carlo points per integral in the training loss.
    pub n_samples: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Trapezoid points used for the validation loss.
    pub validation_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_samples: 50,
            learning_rate: 0.02,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            validation_points: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch size and epoch limit must be at least 1".into(),
            ));
        }
        if self.validation_points < 2 {
            return Err(Error::InvalidConfig(
                "validation integration needs at least 2 points".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean losses; `best_epoch` is zero-based.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }
}

/// Runs the optimization loop.
///
/// `step` returns the mean loss and gradient over the records whose indices
/// it receives; `validate` scores a parameter set deterministically. The
/// parameters from the best validation epoch are returned.
pub fn fit<S, V>(
    init: ParameterSet,
    n_train: usize,
    cfg: &TrainConfig,
    mut step: S,
    mut validate: V,
) -> Result<(ParameterSet, TrainHistory)>
where
    S: FnMut(&ParameterSet, &[usize], &mut ChaCha8Rng) -> Result<(f64, Gradients)>,
    V: FnMut(&ParameterSet) -> Result<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::EmptyDataset("training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = step(&params, batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    primitive: "training loss",
                });
            }
            adam_update(&mut params, &grads, &mut state, cfg.learning_rate)?;
            epoch_loss += loss;
            n_batches += 1;
        }
        let val = validate(&params)?;
        if !val.is_finite() {
            return Err(Error::NonFinite {
                primitive: "validation loss",
            });
        }
        history.train_loss.push(epoch_loss / n_batches as f64);
        history.val_loss.push(val);
        log::debug!(
            "epoch {epoch}: train {:.5} val {val:.5}",
            history.train_loss[epoch]
        );

        if val < best_val {
            best_val = val;
            best = params.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}
