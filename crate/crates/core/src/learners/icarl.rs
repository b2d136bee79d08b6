//! Distillation with rehearsal and nearest-mean-of-exemplars prediction.

use super::lwf::validate_distill;
use super::{fit_supervised, Algorithm, Base, Distill, DistillConfig, Learner, LearnerConfig, TaskLog, Teacher};
use crate::error::Result;
use crate::memory::ExemplarSet;
use crate::model::{CompositeNet, HeadMode};
use crate::stream::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Icarl {
    base: Base,
    cfg: DistillConfig,
    teacher: Option<Teacher>,
}

impl Icarl {
    pub fn new(cfg: &LearnerConfig, distill: DistillConfig) -> Result<Self> {
        validate_distill(&distill)?;
        Ok(Icarl {
            base: Base::new(cfg, HeadMode::Linear, true)?,
            cfg: distill,
            teacher: None,
        })
    }

    /// Labels from the linear head instead of the class means.
    pub fn predict_with_head(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.base.predict_argmax(batch)
    }
}

impl Learner for Icarl {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Icarl
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        let pool = self.base.rehearsal_pool(task)?;
        let distill = self.teacher.as_ref().map(|teacher| Distill {
            teacher,
            temperature: self.cfg.temperature,
            weight: self.cfg.kd_weight.resolve(task),
        });
        fit_supervised(&mut self.base, task, "train", &pool, distill.as_ref())?;
        self.base.update_memory(task)?;
        self.teacher = Some(Teacher::new(&self.base.net));
        self.base.finish_task(task);
        Ok(())
    }

    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.base.require_trained()?;
        let memory = self.base.memory.as_ref().expect("icarl keeps a memory");
        memory.nme_classify(|x| self.base.net.features(x), batch)
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
