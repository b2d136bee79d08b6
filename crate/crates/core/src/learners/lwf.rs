//! Learning without forgetting: distillation towards the previous network,
//! no stored data.

use super::{fit_supervised, Algorithm, Base, DistillConfig, Distill, Learner, LearnerConfig, TaskLog, Teacher};
use crate::error::{CilError, Result};
use crate::memory::ExemplarSet;
use crate::model::{CompositeNet, HeadMode};
use crate::stream::Task;
use crate::tensor::Tensor;

pub(crate) fn validate_distill(cfg: &DistillConfig) -> Result<()> {
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(CilError::invalid(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    if let super::KdWeight::Fixed(w) = cfg.kd_weight {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(CilError::invalid(format!("kd_weight must be >= 0, got {w}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Lwf {
    base: Base,
    cfg: DistillConfig,
    teacher: Option<Teacher>,
}

impl Lwf {
    pub fn new(cfg: &LearnerConfig, distill: DistillConfig) -> Result<Self> {
        validate_distill(&distill)?;
        Ok(Lwf {
            base: Base::new(cfg, HeadMode::Linear, false)?,
            cfg: distill,
            teacher: None,
        })
    }
}

impl Learner for Lwf {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Lwf
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        let distill = self.teacher.as_ref().map(|teacher| Distill {
            teacher,
            temperature: self.cfg.temperature,
            weight: self.cfg.kd_weight.resolve(task),
        });
        fit_supervised(&mut self.base, task, "train", &task.train, distill.as_ref())?;
        self.teacher = Some(Teacher::new(&self.base.net));
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
