//! Weight aligning: distillation with rehearsal, then the new-class head
//! rows are rescaled so their mean norm matches the old rows.

use super::lwf::validate_distill;
use super::{fit_supervised, Algorithm, Base, Distill, DistillConfig, Learner, LearnerConfig, TaskLog, Teacher};
use crate::error::{CilError, Result};
use crate::linalg::norm;
use crate::memory::ExemplarSet;
use crate::model::{CompositeNet, HeadMode, IncrementalHead};
use crate::stream::Task;
use crate::tensor::Tensor;

/// Scales rows `old_count..old_count + new_count` of the head weight by
/// `gamma = mean old row norm / mean new row norm` and returns `gamma`.
/// Biases are left alone.
pub fn wa_align(head: &mut IncrementalHead, old_count: usize, new_count: usize) -> Result<f64> {
    if old_count == 0 || new_count == 0 {
        return Err(CilError::invalid("wa_align: needs at least one old and one new class"));
    }
    if old_count + new_count > head.num_classes() {
        return Err(CilError::invalid(format!(
            "wa_align: {} + {} rows requested from a head with {}",
            old_count,
            new_count,
            head.num_classes()
        )));
    }
    let mean_norm = |range: std::ops::Range<usize>, head: &IncrementalHead| {
        let n = range.len() as f64;
        range.map(|c| norm(head.row(c))).sum::<f64>() / n
    };
    let old_mean = mean_norm(0..old_count, head);
    let new_mean = mean_norm(old_count..old_count + new_count, head);
    if new_mean == 0.0 {
        return Err(CilError::invalid("wa_align: new-class rows have zero norm"));
    }
    let gamma = old_mean / new_mean;
    let f = head.feature_dim();
    let w = head.weight_mut().expect("non-empty head has weights");
    for v in &mut w.data_mut()[old_count * f..(old_count + new_count) * f] {
        *v *= gamma;
    }
    Ok(gamma)
}

#[derive(Debug, Clone)]
pub struct Wa {
    base: Base,
    cfg: DistillConfig,
    teacher: Option<Teacher>,
    gammas: Vec<f64>,
}

impl Wa {
    pub fn new(cfg: &LearnerConfig, distill: DistillConfig) -> Result<Self> {
        validate_distill(&distill)?;
        Ok(Wa {
            base: Base::new(cfg, HeadMode::Linear, true)?,
            cfg: distill,
            teacher: None,
            gammas: Vec::new(),
        })
    }

    /// The alignment factor applied after each task from the second on.
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }
}

impl Learner for Wa {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Wa
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
        if task.num_old_classes() > 0 {
            let gamma = wa_align(self.base.net.head_mut(), task.num_old_classes(), task.num_new_classes())?;
            self.gammas.push(gamma);
        }
        self.base.update_memory(task)?;
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
        self.base.memory.as_ref()
    }

    fn network(&self) -> &CompositeNet {
        &self.base.net
    }

    fn train_logs(&self) -> &[TaskLog] {
        &self.base.logs
    }
}
