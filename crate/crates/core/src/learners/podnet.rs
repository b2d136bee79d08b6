//! Pooled-output distillation with a cosine classifier.
//!
//! The distillation term compares L2-normalized activations of the current
//! and the previous network on the same batch:
//!
//! * spatial: for every hidden layer, the batch mean of `||a/|a| - b/|b|||^2`,
//!   averaged over layers;
//! * flat: the same quantity on the final feature vector.

use serde::{Deserialize, Serialize};

use super::{supervised_step, Algorithm, Base, ExtraTerm, Learner, LearnerConfig, TaskLog, Teacher, SEED_TRAIN};
use crate::autodiff::{Tape, Var};
use crate::engine;
use crate::error::{CilError, Result};
use crate::memory::ExemplarSet;
use crate::model::{BoundNet, CompositeNet, HeadMode, NetOutput};
use crate::stream::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodConfig {
    /// Multiplier of the cosine logits.
    pub scale: f64,
    pub spatial_weight: f64,
    pub flat_weight: f64,
}

impl Default for PodConfig {
    fn default() -> Self {
        PodConfig {
            scale: 16.0,
            spatial_weight: 1.0,
            flat_weight: 1.0,
        }
    }
}

fn normalized_distance(tape: &mut Tape, old: &Tensor, new: Var) -> Result<Var> {
    let n = tape.value(new).rows() as f64;
    let o = tape.constant(old)?;
    let o = tape.row_normalize(o)?;
    let m = tape.row_normalize(new)?;
    let d = tape.sub(m, o)?;
    let s = tape.l2_norm_sq(d)?;
    tape.scale(s, 1.0 / n)
}

/// `spatial_weight * mean_l D(old_l, new_l) + flat_weight * D(old_f, new_f)`
/// where `D` is the batch mean of the squared distance between row-normalized
/// activations. The old activations are constants.
pub fn pod_loss(
    tape: &mut Tape,
    old_intermediates: &[Tensor],
    new_intermediates: &[Var],
    old_features: &Tensor,
    new_features: Var,
    spatial_weight: f64,
    flat_weight: f64,
) -> Result<Var> {
    if old_intermediates.len() != new_intermediates.len() || old_intermediates.is_empty() {
        return Err(CilError::invalid(format!(
            "pod_loss: {} old layers vs {} new layers",
            old_intermediates.len(),
            new_intermediates.len()
        )));
    }
    let mut spatial: Option<Var> = None;
    for (old, &new) in old_intermediates.iter().zip(new_intermediates) {
        if old.shape() != tape.shape(new) {
            return Err(CilError::Shape {
                op: "pod_loss",
                lhs: old.shape().to_vec(),
                rhs: tape.shape(new).to_vec(),
            });
        }
        let d = normalized_distance(tape, old, new)?;
        spatial = Some(match spatial {
            Some(s) => tape.add(s, d)?,
            None => d,
        });
    }
    let spatial = spatial.expect("at least one layer");
    let spatial = tape.scale(spatial, spatial_weight / old_intermediates.len() as f64)?;
    if old_features.shape() != tape.shape(new_features) {
        return Err(CilError::Shape {
            op: "pod_loss",
            lhs: old_features.shape().to_vec(),
            rhs: tape.shape(new_features).to_vec(),
        });
    }
    let flat = normalized_distance(tape, old_features, new_features)?;
    let flat = tape.scale(flat, flat_weight)?;
    tape.add(spatial, flat)
}

#[derive(Debug, Clone)]
pub struct Podnet {
    base: Base,
    cfg: PodConfig,
    teacher: Option<Teacher>,
}

impl Podnet {
    pub fn new(cfg: &LearnerConfig, pod: PodConfig) -> Result<Self> {
        if !(pod.scale > 0.0) || !(pod.spatial_weight >= 0.0) || !(pod.flat_weight >= 0.0) {
            return Err(CilError::invalid("podnet: scale must be positive and weights non-negative"));
        }
        Ok(Podnet {
            base: Base::new(cfg, HeadMode::Cosine { scale: pod.scale }, true)?,
            cfg: pod,
            teacher: None,
        })
    }
}

impl Learner for Podnet {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Podnet
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        let pool = self.base.rehearsal_pool(task)?;
        let seed = self.base.task_seed(SEED_TRAIN, task);
        let optim = self.base.optim.clone();
        let cfg = &self.cfg;
        let teacher = self
            .teacher
            .as_ref()
            .filter(|_| cfg.spatial_weight != 0.0 || cfg.flat_weight != 0.0);
        let mut pod = |tape: &mut Tape, _: &BoundNet, out: &NetOutput, x: &Tensor, _: &[usize]| -> Result<Option<Var>> {
            let Some(t) = teacher else {
                return Ok(None);
            };
            let old = t.net.forward_batch(x)?;
            pod_loss(
                tape,
                &old.intermediates[0],
                &out.intermediates[0],
                &old.features,
                out.features,
                cfg.spatial_weight,
                cfg.flat_weight,
            )
            .map(Some)
        };
        let log = engine::train(&mut self.base.net, pool.len(), &optim, seed, |net, idx| {
            let extra: &mut ExtraTerm<'_> = &mut pod;
            supervised_step(net, &pool, idx, None, Some(extra))
        })?;
        self.base.record(task, "train", log);
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
