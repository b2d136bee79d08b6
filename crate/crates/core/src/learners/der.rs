//! Dynamically expandable representation: one frozen feature branch per
//! earlier task plus a fresh trainable branch, with an auxiliary head that
//! separates the new classes from everything old.

use serde::{Deserialize, Serialize};

use super::{Algorithm, Base, Learner, LearnerConfig, TaskLog, SEED_AUX, SEED_BALANCE, SEED_BRANCH, SEED_HEAD, SEED_TRAIN};
use crate::autodiff::Tape;
use crate::engine::{self, OptimConfig, StepOutput, Trainable};
use crate::error::{CilError, Result};
use crate::memory::{per_class_quota, ExemplarSet};
use crate::model::{CompositeNet, HeadMode, IncrementalHead};
use crate::rng;
use crate::stream::{Dataset, Task};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerConfig {
    pub aux_weight: f64,
    /// Epochs of head-only training on a class-balanced set; 0 disables it.
    pub balanced_epochs: usize,
    pub balanced_lr: f64,
}

impl Default for DerConfig {
    fn default() -> Self {
        DerConfig {
            aux_weight: 1.0,
            balanced_epochs: 10,
            balanced_lr: 0.05,
        }
    }
}

/// Auxiliary label: 0 for every old class, `1 + k` for the k-th new class.
pub fn aux_target(label: usize, old_classes: usize) -> usize {
    if label < old_classes {
        0
    } else {
        label - old_classes + 1
    }
}

struct DerModel<'a> {
    net: &'a mut CompositeNet,
    aux: &'a mut IncrementalHead,
}

impl Trainable for DerModel<'_> {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.net.params();
        p.extend(self.aux.weight());
        p.extend(self.aux.bias());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.net.params_mut();
        let (w, b) = self.aux.weight_and_bias_mut();
        p.extend(w);
        p.extend(b);
        p
    }
}

#[derive(Debug, Clone)]
pub struct Der {
    base: Base,
    cfg: DerConfig,
}

impl Der {
    pub fn new(cfg: &LearnerConfig, der: DerConfig) -> Result<Self> {
        if !(der.aux_weight >= 0.0) || !(der.balanced_lr > 0.0) {
            return Err(CilError::invalid("der: aux_weight must be >= 0 and balanced_lr positive"));
        }
        Ok(Der {
            base: Base::new(cfg, HeadMode::Linear, true)?,
            cfg: der,
        })
    }

    fn train_with_aux(&mut self, task: &Task, pool: &Dataset) -> Result<()> {
        let old = task.num_old_classes();
        let branch_dim = self.base.spec.feature_dim();
        let mut aux = IncrementalHead::new(branch_dim, HeadMode::Linear);
        aux.expand(task.num_new_classes() + 1, self.base.task_seed(SEED_AUX, task))?;
        let seed = self.base.task_seed(SEED_TRAIN, task);
        let optim = self.base.optim.clone();
        let aux_weight = self.cfg.aux_weight;
        let mut model = DerModel {
            net: &mut self.base.net,
            aux: &mut aux,
        };
        let log = engine::train(&mut model, pool.len(), &optim, seed, |m, idx| {
            let (x, y) = pool.gather(idx)?;
            let mut tape = Tape::new();
            let bound = m.net.bind(&mut tape)?;
            let xv = tape.constant(&x)?;
            let out = m.net.forward(&mut tape, &bound, xv)?;
            let logits = out.logits.expect("head was expanded");
            let mut loss = tape.softmax_cross_entropy(logits, &y)?;
            let aw = tape.param(m.aux.weight().expect("aux head was expanded"))?;
            let ab = tape.param(m.aux.bias().expect("linear aux head has a bias"))?;
            let branch = *out.branch_features.last().expect("at least one branch");
            let aux_logits = m.aux.apply(&mut tape, branch, aw, Some(ab))?;
            let aux_y: Vec<usize> = y.iter().map(|&l| aux_target(l, old)).collect();
            let aux_loss = tape.softmax_cross_entropy(aux_logits, &aux_y)?;
            let aux_loss = tape.scale(aux_loss, aux_weight)?;
            loss = tape.add(loss, aux_loss)?;
            let mut vars = bound.trainable().to_vec();
            vars.extend([aw, ab]);
            StepOutput::from_tape(&mut tape, loss, &vars)
        })?;
        self.base.record(task, "train", log);
        Ok(())
    }

    /// Head-only training on an equal number of instances per seen class.
    fn balanced_finetune(&mut self, task: &Task) -> Result<()> {
        let memory = self.base.memory.as_ref().expect("der keeps a memory");
        let k = per_class_quota(memory.budget(), task.num_seen_classes());
        let seen = task.num_seen_classes();
        let mut parts = Vec::new();
        for c in memory.class_ids() {
            let m = memory.class(c).expect("listed class");
            let rows = &m.instances()[..k.min(m.len())];
            let data: Vec<f64> = rows.concat();
            parts.push(Dataset::from_rows(rows[0].len(), data, vec![c; rows.len()], seen)?);
        }
        let seed = self.base.task_seed(SEED_BALANCE, task);
        for c in task.label_range.clone() {
            let idx = task.train.indices_of_class(c);
            let take: Vec<usize> = rng::permutation(idx.len(), rng::derive_seed(seed, &[c as u64]))
                .into_iter()
                .take(k)
                .map(|p| idx[p])
                .collect();
            parts.push(task.train.subset(&take)?);
        }
        let refs: Vec<&Dataset> = parts.iter().collect();
        let balanced = Dataset::concat(&refs)?;

        let mask = self.base.net.frozen_mask().to_vec();
        for b in 0..mask.len() {
            self.base.net.set_frozen(b, true);
        }
        let optim = OptimConfig::with_default_schedule(
            self.cfg.balanced_lr,
            self.cfg.balanced_epochs,
            self.base.optim.batch_size,
        );
        let result = engine::train(&mut self.base.net, balanced.len(), &optim, seed, |net, idx| {
            super::supervised_step(net, &balanced, idx, None, None)
        });
        for (b, &f) in mask.iter().enumerate() {
            self.base.net.set_frozen(b, f);
        }
        self.base.record(task, "balanced", result?);
        Ok(())
    }
}

impl Learner for Der {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Der
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.check_task(task)?;
        if task.index == 0 {
            self.base.begin_task(task)?;
            super::fit_supervised(&mut self.base, task, "train", &task.train, None)?;
        } else {
            let spec = self.base.spec.clone();
            self.base
                .net
                .expand_branch(spec, self.base.task_seed(SEED_BRANCH, task))?;
            let head_seed = self.base.task_seed(SEED_HEAD, task);
            self.base.net.expand_head(task.num_new_classes(), head_seed)?;
            let pool = self.base.rehearsal_pool(task)?;
            self.train_with_aux(task, &pool)?;
            if self.cfg.balanced_epochs > 0 {
                self.balanced_finetune(task)?;
            }
        }
        self.base.update_memory(task)?;
        self.base.finish_task(task);
        Ok(())
    }

    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.base.predict_argmax(batch)
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
