//! Dice loss, AdamW, weight averaging and the training loop.

mod fit;
mod loss;
mod optim;
mod swa;

pub use fit::{fit, fit_with, EpochLog, FitOutcome, Sample, TrainConfig, TrainLog};
pub use loss::{dice_loss, dice_loss_batch};
pub use optim::{AdamW, AdamWConfig};
pub use swa::Swa;
