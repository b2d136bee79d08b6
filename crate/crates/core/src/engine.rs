//! Seeded minibatch SGD with momentum, weight decay and step milestones.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CilError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Anything whose trainable tensors can be listed in a stable order.
pub trait Trainable {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplicative lr changes applied from the given (0-based) epoch on.
    pub milestones: Vec<Milestone>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::with_default_schedule(0.1, 30, 32)
    }
}

impl OptimConfig {
    /// Momentum 0.9, weight decay 5e-4, lr halved at 60% and 80% of the epochs.
    pub fn with_default_schedule(lr: f64, epochs: usize, batch_size: usize) -> Self {
        let m1 = epochs * 6 / 10;
        let m2 = epochs * 8 / 10;
        let mut milestones = vec![];
        if m1 > 0 {
            milestones.push(Milestone { epoch: m1, factor: 0.5 });
        }
        if m2 > m1 {
            milestones.push(Milestone { epoch: m2, factor: 0.5 });
        }
        OptimConfig {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs,
            batch_size,
            milestones,
        }
    }

    /// Plain gradient descent: no momentum, decay or schedule.
    pub fn plain(lr: f64, epochs: usize, batch_size: usize) -> Self {
        OptimConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs,
            batch_size,
            milestones: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CilError::invalid(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CilError::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CilError::invalid("weight_decay must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CilError::invalid("epochs and batch_size must be positive"));
        }
        if self
            .milestones
            .windows(2)
            .any(|w| w[0].epoch >= w[1].epoch)
        {
            return Err(CilError::invalid("milestones must be strictly increasing in epoch"));
        }
        if self.milestones.iter().any(|m| !(m.factor > 0.0)) {
            return Err(CilError::invalid("milestone factors must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|m| m.epoch <= epoch)
            .fold(self.lr, |lr, m| lr * m.factor)
    }
}

/// Loss value and per-parameter gradients of one minibatch, aligned with
/// [`Trainable::params`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

impl StepOutput {
    /// Runs backward from `loss` and collects the gradients of `params`.
    pub fn from_tape(tape: &mut Tape, loss: Var, params: &[Var]) -> Result<Self> {
        tape.backward(loss)?;
        Ok(StepOutput {
            loss: tape.value(loss).item(),
            grads: params.iter().map(|&p| tape.grad_or_zeros(p)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Minibatches of one epoch: a seeded permutation of `0..n` cut into chunks.
/// The final partial batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = rng::permutation(n, rng::derive_seed(seed, &[epoch as u64]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs `epochs * ceil(n / batch_size)` SGD steps. `step` receives the model
/// and the sample indices of one minibatch and returns loss and gradients.
pub fn train<M, F>(model: &mut M, n: usize, cfg: &OptimConfig, seed: u64, mut step: F) -> Result<TrainLog>
where
    M: Trainable + ?Sized,
    F: FnMut(&M, &[usize]) -> Result<StepOutput>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(CilError::invalid("train: empty training set"));
    }
    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let mut velocity: Vec<Vec<f64>> = if cfg.momentum > 0.0 {
        sizes.iter().map(|&s| vec![0.0; s]).collect()
    } else {
        Vec::new()
    };
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, seed, epoch);
        for (step_idx, batch) in batches.iter().enumerate() {
            let out = match step(model, batch) {
                Ok(o) => o,
                Err(CilError::NonFinite { .. }) => {
                    return Err(CilError::TrainingAborted {
                        epoch,
                        step: step_idx,
                    })
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(CilError::TrainingAborted {
                    epoch,
                    step: step_idx,
                });
            }
            if out.grads.len() != sizes.len()
                || out.grads.iter().zip(&sizes).any(|(g, &s)| g.len() != s)
            {
                return Err(CilError::invalid(format!(
                    "train: step returned {} gradients for {} parameters",
                    out.grads.len(),
                    sizes.len()
                )));
            }
            total += out.loss;
            for (p, (param, grad)) in model.params_mut().into_iter().zip(&out.grads).enumerate() {
                let theta = param.data_mut();
                for i in 0..theta.len() {
                    let mut g = grad[i];
                    if cfg.weight_decay > 0.0 {
                        g += cfg.weight_decay * theta[i];
                    }
                    if cfg.momentum > 0.0 {
                        let v = &mut velocity[p][i];
                        *v = cfg.momentum * *v + g;
                        g = *v;
                    }
                    theta[i] -= lr * g;
                }
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: total / batches.len() as f64,
            lr,
        });
    }
    Ok(log)
}
