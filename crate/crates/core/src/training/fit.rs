use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::RainUNet;
use crate::tensor::{Scalar, Tensor};
use crate::training::{dice_loss_batch, AdamW, AdamWConfig, Swa};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Drives minibatch shuffling.
    pub seed: u64,
    pub swa_enabled: bool,
    /// First epoch (1-based) whose end-of-epoch weights enter the average.
    pub swa_start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            swa_enabled: false,
            swa_start_epoch: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(Error::invalid(
                "lr and weight decay must be finite and non-negative",
            ));
        }
        if self.swa_enabled && (self.swa_start_epoch == 0 || self.swa_start_epoch > self.epochs) {
            return Err(Error::invalid(format!(
                "swa start epoch {} must lie in 1..={}",
                self.swa_start_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Input `(C, T, H, W)` with its `(L, H, W)` binary target.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Whether this epoch's weights were added to the average.
    pub swa: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    /// `epoch,mean_loss,swa`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,swa\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.9},{}", e.epoch, e.mean_loss, e.swa as u8);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub log: TrainLog,
    /// Averaged weights in parameter order, when averaging ran.
    pub swa: Option<Vec<Tensor<T>>>,
}

pub fn fit<T: Scalar>(
    model: &mut RainUNet<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<FitOutcome<T>> {
    fit_with(model, data, cfg, |_| {})
}

fn batch<T: Scalar>(data: &[Sample<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let inputs: Vec<&Tensor<T>> = idx.iter().map(|&i| &data[i].input).collect();
    let targets: Vec<&Tensor<T>> = idx.iter().map(|&i| &data[i].target).collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

/// Seeded shuffle, minibatches of `batch_size` (the last may be short),
/// forward, dice loss, backward, AdamW. On a non-finite loss or update the
/// model is left at its weights from before the failing step and
/// [`Error::Diverged`] is returned.
pub fn fit_with<T: Scalar>(
    model: &mut RainUNet<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw());
    let mut swa = cfg.swa_enabled.then(|| Swa::new(cfg.swa_start_epoch));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |source: Error| Error::Diverged {
                epoch,
                step,
                source: Box::new(source),
            };
            let (x, y) = batch(data, idx)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let yv = g.constant(y);
            let loss = model
                .forward(&mut g, xv)
                .and_then(|p| dice_loss_batch(&mut g, p, yv))
                .map_err(|e| match e {
                    Error::NonFinite { .. } => diverged(e),
                    e => e,
                })?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(diverged(Error::NonFinite { op: "dice_loss" }));
            }
            let grads = g.backward(loss)?;
            let before = model.snapshot();
            model.zero_grad();
            model.accumulate_grads(&grads)?;
            if let Err(e) = opt.step(&mut model.params_mut()) {
                model.load_snapshot(&before)?;
                return Err(diverged(e));
            }
            total += value;
            batches += 1;
            log.step_losses.push(value);
        }
        let averaged = match &mut swa {
            Some(s) if epoch >= s.start_epoch => {
                s.accumulate(&model.params())?;
                true
            }
            _ => false,
        };
        let entry = EpochLog {
            epoch,
            mean_loss: total / batches as f64,
            swa: averaged,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    model.zero_grad();
    let swa = match swa {
        Some(s) if s.count() > 0 => Some(s.finalize()?),
        _ => None,
    };
    Ok(FitOutcome { log, swa })
}
