//! Bias correction: after training on old exemplars and new data, a two
//! parameter affine layer on the new-class logits is fitted on a small
//! balanced validation split.

use serde::{Deserialize, Serialize};

use super::{
    lwf::validate_distill, Algorithm, Base, Distill, DistillConfig, KdWeight, Learner, LearnerConfig, TaskLog,
    Teacher, SEED_BIAS, SEED_SPLIT,
};
use crate::autodiff::Tape;
use crate::engine::{self, OptimConfig, StepOutput, Trainable};
use crate::error::{CilError, Result};
use crate::memory::ExemplarSet;
use crate::metrics::argmax;
use crate::model::{CompositeNet, HeadMode};
use crate::rng;
use crate::stream::{Dataset, Task};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicConfig {
    pub temperature: f64,
    pub kd_weight: KdWeight,
    /// Share of each old class's exemplars held out for the bias fit.
    pub val_fraction: f64,
    pub bias_epochs: usize,
    pub bias_lr: f64,
    pub bias_batch_size: usize,
}

impl Default for BicConfig {
    fn default() -> Self {
        BicConfig {
            temperature: 2.0,
            kd_weight: KdWeight::ADAPTIVE,
            val_fraction: 0.1,
            bias_epochs: 50,
            bias_lr: 0.05,
            bias_batch_size: 16,
        }
    }
}

/// `z -> alpha * z + beta` on logit columns `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiCLayer {
    pub start: usize,
    pub end: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl BiCLayer {
    pub fn identity(start: usize, end: usize) -> Self {
        BiCLayer {
            start,
            end,
            alpha: 1.0,
            beta: 0.0,
        }
    }

    pub fn apply_in_place(&self, logits: &mut Tensor) {
        let c = logits.cols();
        let end = self.end.min(c);
        let rows = logits.rows();
        let d = logits.data_mut();
        for r in 0..rows {
            for j in self.start..end {
                d[r * c + j] = self.alpha * d[r * c + j] + self.beta;
            }
        }
    }
}

struct AffineParams {
    alpha: Tensor,
    beta: Tensor,
}

impl Trainable for AffineParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.alpha, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.alpha, &mut self.beta]
    }
}

/// Fits `alpha, beta` on columns `start..` of fixed `logits` by minimizing
/// cross-entropy over all columns, starting from the identity.
pub fn fit_bias_layer(logits: &Tensor, labels: &[usize], start: usize, optim: &OptimConfig, seed: u64) -> Result<BiCLayer> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() || labels.is_empty() {
        return Err(CilError::invalid("fit_bias_layer: logits and labels disagree"));
    }
    let c = logits.cols();
    if start >= c {
        return Err(CilError::invalid("fit_bias_layer: no columns to correct"));
    }
    let mut params = AffineParams {
        alpha: Tensor::scalar(1.0),
        beta: Tensor::scalar(0.0),
    };
    engine::train(&mut params, labels.len(), optim, seed, |p, idx| {
        let z = logits.gather_rows(idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let a = tape.param(&p.alpha)?;
        let b = tape.param(&p.beta)?;
        let zv = tape.constant_owned(z)?;
        let corrected = tape.scalar_affine_tail(zv, a, b, start)?;
        let loss = tape.softmax_cross_entropy(corrected, &y)?;
        StepOutput::from_tape(&mut tape, loss, &[a, b])
    })?;
    Ok(BiCLayer {
        start,
        end: c,
        alpha: params.alpha.item(),
        beta: params.beta.item(),
    })
}

/// Train and validation parts of one task's rehearsal data.
struct Split {
    train: Dataset,
    val: Dataset,
}

fn split_indices(indices: &[usize], k: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = rng::permutation(indices.len(), seed);
    let mut val: Vec<usize> = perm[..k].iter().map(|&p| indices[p]).collect();
    let mut train: Vec<usize> = perm[k..].iter().map(|&p| indices[p]).collect();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn validation_split(task: &Task, memory: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    let seen = task.num_seen_classes();
    let mut mem_train = Vec::new();
    let mut mem_val = Vec::new();
    let mut per_class_val = 0;
    for c in 0..task.num_old_classes() {
        let idx = memory.indices_of_class(c);
        let k = (fraction * idx.len() as f64).ceil() as usize;
        if idx.is_empty() || k == 0 {
            return Err(CilError::invalid(format!("bic: validation split of old class {c} is empty")));
        }
        let (t, v) = split_indices(&idx, k.min(idx.len()), rng::derive_seed(seed, &[c as u64]));
        mem_train.extend(t);
        mem_val.extend(v);
        per_class_val = per_class_val.max(k);
    }
    let mut new_train = Vec::new();
    let mut new_val = Vec::new();
    for c in task.label_range.clone() {
        let idx = task.train.indices_of_class(c);
        if idx.len() <= per_class_val {
            return Err(CilError::invalid(format!(
                "bic: class {c} has {} instances, cannot hold out {per_class_val}",
                idx.len()
            )));
        }
        let (t, v) = split_indices(&idx, per_class_val, rng::derive_seed(seed, &[c as u64]));
        new_train.extend(t);
        new_val.extend(v);
    }
    let parts = [
        task.train.subset(&new_train)?,
        memory.subset(&mem_train)?,
    ];
    let val_parts = [memory.subset(&mem_val)?, task.train.subset(&new_val)?];
    let mut train = Dataset::concat(&[&parts[0], &parts[1]])?;
    let mut val = Dataset::concat(&[&val_parts[0], &val_parts[1]])?;
    if train.is_empty() || val.is_empty() {
        return Err(CilError::invalid("bic: empty split"));
    }
    // both parts index labels over every seen class
    train = Dataset::new(train.instances().clone(), train.labels().to_vec(), seen)?;
    val = Dataset::new(val.instances().clone(), val.labels().to_vec(), seen)?;
    Ok(Split { train, val })
}

#[derive(Debug, Clone)]
pub struct Bic {
    base: Base,
    cfg: BicConfig,
    layers: Vec<BiCLayer>,
    teacher: Option<Teacher>,
}

impl Bic {
    pub fn new(cfg: &LearnerConfig, bic: BicConfig) -> Result<Self> {
        validate_distill(&DistillConfig {
            temperature: bic.temperature,
            kd_weight: bic.kd_weight,
        })?;
        if !(bic.val_fraction > 0.0 && bic.val_fraction < 1.0) {
            return Err(CilError::invalid("bic: val_fraction must be in (0, 1)"));
        }
        if bic.bias_epochs == 0 || bic.bias_batch_size == 0 || !(bic.bias_lr > 0.0) {
            return Err(CilError::invalid("bic: bias_epochs, bias_batch_size and bias_lr must be positive"));
        }
        Ok(Bic {
            base: Base::new(cfg, HeadMode::Linear, true)?,
            cfg: bic,
            layers: Vec::new(),
            teacher: None,
        })
    }

    pub fn bias_layers(&self) -> &[BiCLayer] {
        &self.layers
    }

    /// Logits with every task's correction applied.
    pub fn corrected_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut z = self.base.net.logits(batch)?;
        for layer in &self.layers {
            layer.apply_in_place(&mut z);
        }
        Ok(z)
    }
}

impl Learner for Bic {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Bic
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        let memory = self.base.memory.as_ref().expect("bic keeps a memory");
        let mem_data = memory.to_dataset(task.num_seen_classes(), None)?;
        let (Some(teacher), Some(mem_data)) = (self.teacher.as_ref(), mem_data) else {
            super::fit_supervised(&mut self.base, task, "train", &task.train, None)?;
            self.layers.push(BiCLayer::identity(task.label_range.start, task.label_range.end));
            return self.end_task(task);
        };

        let split = validation_split(task, &mem_data, self.cfg.val_fraction, self.base.task_seed(SEED_SPLIT, task))?;
        let distill = Distill {
            teacher,
            temperature: self.cfg.temperature,
            weight: self.cfg.kd_weight.resolve(task),
        };
        super::fit_supervised(&mut self.base, task, "train", &split.train, Some(&distill))?;

        let mut logits = self.base.net.logits(split.val.instances())?;
        for layer in &self.layers {
            layer.apply_in_place(&mut logits);
        }
        let optim = OptimConfig {
            lr: self.cfg.bias_lr,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: self.cfg.bias_epochs,
            batch_size: self.cfg.bias_batch_size,
            milestones: vec![],
        };
        let layer = fit_bias_layer(
            &logits,
            split.val.labels(),
            task.label_range.start,
            &optim,
            self.base.task_seed(SEED_BIAS, task),
        )?;
        self.layers.push(layer);
        self.end_task(task)
    }

    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.base.require_trained()?;
        let z = self.corrected_logits(batch)?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }

    fn num_seen_classes(&self) -> usize {
        self.base.seen
    }

    fn memory(&self) -> Option<&ExemplarSet> {
        self.base.memory.as_ref()
    }

    fn network(&self) -> &CompositeNet {
        &self.base.net
    }

    fn train_logs(&self) -> &[TaskLog] {
        &self.base.logs
    }
}

impl Bic {
    fn end_task(&mut self, task: &Task) -> Result<()> {
        self.base.update_memory(task)?;
        let mut teacher = Teacher::new(&self.base.net);
        teacher.bias_layers = self.layers.clone();
        self.teacher = Some(teacher);
        self.base.finish_task(task);
        Ok(())
    }
}
