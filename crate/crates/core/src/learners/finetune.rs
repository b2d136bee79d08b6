//! Plain finetuning and uniform exemplar replay.

use serde::{Deserialize, Serialize};

use super::{fit_supervised, Algorithm, Base, Learner, LearnerConfig, TaskLog};
use crate::error::{CilError, Result};
use crate::memory::ExemplarSet;
use crate::model::{CompositeNet, HeadMode};
use crate::stream::{Dataset, Task};
use crate::tensor::Tensor;

/// Cross-entropy on the current task only. No memory, no regularization.
#[derive(Debug, Clone)]
pub struct Finetune {
    base: Base,
}

impl Finetune {
    pub fn new(cfg: &LearnerConfig) -> Result<Self> {
        Ok(Finetune {
            base: Base::new(cfg, HeadMode::Linear, false)?,
        })
    }
}

impl Learner for Finetune {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Finetune
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        fit_supervised(&mut self.base, task, "train", &task.train, None)?;
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
        None
    }

    fn network(&self) -> &CompositeNet {
        &self.base.net
    }

    fn train_logs(&self) -> &[TaskLog] {
        &self.base.logs
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    /// Repeat exemplars so old classes get about as many samples per epoch
    /// as new ones.
    pub balanced: bool,
}

/// Current task data plus exemplars. With `balanced`, each exemplar appears
/// `max(1, round(mean new-class count / mean exemplar count))` times.
pub fn rehearsal_pool(train: &Dataset, memory: &ExemplarSet, num_classes: usize, balanced: bool) -> Result<Dataset> {
    let Some(mem) = memory.to_dataset(num_classes, None)? else {
        return Ok(train.clone());
    };
    let copies = if balanced {
        let new_counts: Vec<usize> = train.class_counts().into_iter().filter(|&c| c > 0).collect();
        let new_mean = new_counts.iter().sum::<usize>() as f64 / new_counts.len().max(1) as f64;
        let mem_mean = mem.len() as f64 / memory.num_classes() as f64;
        ((new_mean / mem_mean).round() as usize).max(1)
    } else {
        1
    };
    let mut parts = vec![train];
    parts.extend(std::iter::repeat_n(&mem, copies));
    Dataset::concat(&parts)
}

/// Cross-entropy on the current task merged with the exemplar memory.
#[derive(Debug, Clone)]
pub struct Replay {
    base: Base,
    cfg: ReplayConfig,
}

impl Replay {
    pub fn new(cfg: &LearnerConfig, replay: ReplayConfig) -> Result<Self> {
        Ok(Replay {
            base: Base::new(cfg, HeadMode::Linear, true)?,
            cfg: replay,
        })
    }
}

impl Learner for Replay {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Replay
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        let memory = self.base.memory.as_ref().expect("replay keeps a memory");
        if task.index > 0 && memory.is_empty() {
            return Err(CilError::invalid("replay: memory is empty after the first task"));
        }
        let pool = rehearsal_pool(&task.train, memory, task.num_seen_classes(), self.cfg.balanced)?;
        fit_supervised(&mut self.base, task, "train", &pool, None)?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::epoch_batches;
    use crate::memory::NewClassData;

    fn dataset(per_class: &[(usize, usize)], num_classes: usize) -> Dataset {
        let mut data = vec![];
        let mut labels = vec![];
        for &(class, n) in per_class {
            for i in 0..n {
                data.extend([class as f64, i as f64]);
                labels.push(class);
            }
        }
        Dataset::from_rows(2, data, labels, num_classes).unwrap()
    }

    fn memory_with(classes: &[usize], per_class: usize) -> ExemplarSet {
        let mut mem = ExemplarSet::new(classes.len() * per_class).unwrap();
        let src = dataset(&classes.iter().map(|&c| (c, per_class)).collect::<Vec<_>>(), 4);
        let new: Vec<NewClassData> = classes
            .iter()
            .map(|&c| NewClassData::from_dataset(&src, c).unwrap())
            .collect();
        mem.update(&new, classes.len(), |t| Ok(t.clone())).unwrap();
        mem
    }

    #[test]
    fn uniform_merge_samples_exemplars_by_share() {
        let train = dataset(&[(2, 40), (3, 40)], 4);
        let mem = memory_with(&[0, 1], 10);
        let pool = rehearsal_pool(&train, &mem, 4, false).unwrap();
        assert_eq!(pool.len(), 100);
        let labels = pool.labels().to_vec();
        let old_in_batches: usize = epoch_batches(pool.len(), 10, 5, 0)
            .iter()
            .map(|b| b.iter().filter(|&&i| labels[i] < 2).count())
            .sum();
        // every instance is drawn exactly once per epoch
        assert_eq!(old_in_batches, 20);
    }

    #[test]
    fn balanced_merge_repeats_exemplars() {
        let train = dataset(&[(2, 40), (3, 40)], 4);
        let mem = memory_with(&[0, 1], 10);
        let pool = rehearsal_pool(&train, &mem, 4, true).unwrap();
        let counts = pool.class_counts();
        assert_eq!(counts, vec![40, 40, 40, 40]);
    }
}
