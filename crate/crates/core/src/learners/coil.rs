//! Co-transport between old and new classes.
//!
//! A transport plan between old-class and new-class prototypes (normalized
//! feature means) is computed with Sinkhorn at the start of every task after
//! the first. It is used twice:
//!
//! * prospectively, each new head row starts as the plan-weighted average of
//!   the old rows;
//! * retrospectively, the new-class logits mapped through the plan are
//!   distilled towards the previous network's old-class logits.

use serde::{Deserialize, Serialize};

use super::lwf::validate_distill;
use super::{
    supervised_step, Algorithm, Base, Distill, DistillConfig, ExtraTerm, KdWeight, Learner, LearnerConfig, TaskLog,
    Teacher, SEED_TRAIN,
};
use crate::autodiff::{Tape, Var};
use crate::engine;
use crate::error::{CilError, Result};
use crate::linalg::norm;
use crate::memory::{normalized_mean, ExemplarSet};
use crate::model::{BoundNet, CompositeNet, HeadMode, NetOutput};
use crate::stream::Task;
use crate::tensor::Tensor;

use super::ot::sinkhorn;

/// Smallest cost entry handed to Sinkhorn.
pub const COST_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoilConfig {
    pub temperature: f64,
    pub kd_weight: KdWeight,
    pub epsilon: f64,
    pub transfer_weight: f64,
    /// Initialize new head rows from the plan.
    pub prospective: bool,
    pub sinkhorn_iters: usize,
}

impl Default for CoilConfig {
    fn default() -> Self {
        CoilConfig {
            temperature: 2.0,
            kd_weight: KdWeight::ADAPTIVE,
            epsilon: 0.1,
            transfer_weight: 1.0,
            prospective: true,
            sinkhorn_iters: 10_000,
        }
    }
}

/// Euclidean distances between prototypes, divided by their maximum and
/// floored at [`COST_FLOOR`].
pub fn prototype_cost(old: &[Vec<f64>], new: &[Vec<f64>]) -> Result<Tensor> {
    if old.is_empty() || new.is_empty() {
        return Err(CilError::invalid("coil: needs old and new prototypes"));
    }
    let mut c: Vec<f64> = old
        .iter()
        .flat_map(|o| new.iter().map(move |n| crate::linalg::sq_dist(o, n).sqrt()))
        .collect();
    let max = c.iter().cloned().fold(0.0, f64::max);
    for v in &mut c {
        if max > 0.0 {
            *v /= max;
        }
        *v = v.max(COST_FLOOR);
    }
    Tensor::new(vec![old.len(), new.len()], c)
}

/// New rows `w_j = sum_i P[i, j] w_i / sum_i P[i, j]` from old rows `w_i`.
pub fn transfer_rows(old_rows: &[&[f64]], plan: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (p, q) = (plan.rows(), plan.cols());
    if old_rows.len() != p {
        return Err(CilError::Shape {
            op: "transfer_rows",
            lhs: plan.shape().to_vec(),
            rhs: vec![old_rows.len()],
        });
    }
    let dim = old_rows.first().map_or(0, |r| r.len());
    let mut out = Vec::with_capacity(q);
    for j in 0..q {
        let col: Vec<f64> = (0..p).map(|i| plan.row(i)[j]).collect();
        let mass: f64 = col.iter().sum();
        let mut row = vec![0.0; dim];
        for (i, w) in old_rows.iter().enumerate() {
            let share = col[i] / mass;
            for (r, x) in row.iter_mut().zip(w.iter()) {
                *r += share * x;
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// `(new, old)` matrix that maps new-class logits onto old classes: the
/// transposed plan with every old-class row normalized to sum one.
pub fn retrospective_map(plan: &Tensor) -> Tensor {
    let (p, q) = (plan.rows(), plan.cols());
    let mut m = vec![0.0; q * p];
    for i in 0..p {
        let mass: f64 = plan.row(i).iter().sum();
        for j in 0..q {
            m[j * p + i] = plan.row(i)[j] / mass;
        }
    }
    Tensor::from_parts(vec![q, p], m)
}

#[derive(Debug, Clone)]
pub struct Coil {
    base: Base,
    cfg: CoilConfig,
    teacher: Option<Teacher>,
    plans: Vec<Tensor>,
}

impl Coil {
    pub fn new(cfg: &LearnerConfig, coil: CoilConfig) -> Result<Self> {
        validate_distill(&DistillConfig {
            temperature: coil.temperature,
            kd_weight: coil.kd_weight,
        })?;
        if !(coil.epsilon > 0.0) || !(coil.transfer_weight >= 0.0) || coil.sinkhorn_iters == 0 {
            return Err(CilError::invalid(
                "coil: epsilon and sinkhorn_iters must be positive, transfer_weight >= 0",
            ));
        }
        Ok(Coil {
            base: Base::new(cfg, HeadMode::Linear, true)?,
            cfg: coil,
            teacher: None,
            plans: Vec::new(),
        })
    }

    /// Transport plans of every task after the first.
    pub fn plans(&self) -> &[Tensor] {
        &self.plans
    }

    fn plan_for(&self, task: &Task) -> Result<Tensor> {
        let memory = self.base.memory.as_ref().expect("coil keeps a memory");
        let old: Vec<Vec<f64>> = (0..task.num_old_classes())
            .map(|c| {
                memory
                    .class(c)
                    .map(|m| m.mean().to_vec())
                    .ok_or_else(|| CilError::invalid(format!("coil: class {c} has no exemplars")))
            })
            .collect::<Result<_>>()?;
        let new: Vec<Vec<f64>> = task
            .label_range
            .clone()
            .map(|c| {
                let idx = task.train.indices_of_class(c);
                let (x, _) = task.train.gather(&idx)?;
                Ok(normalized_mean(&self.base.net.features(&x)?))
            })
            .collect::<Result<_>>()?;
        let cost = prototype_cost(&old, &new)?;
        let a = vec![1.0 / old.len() as f64; old.len()];
        let b = vec![1.0 / new.len() as f64; new.len()];
        sinkhorn(&cost, &a, &b, self.cfg.epsilon, self.cfg.sinkhorn_iters)
    }

    fn init_new_rows(&mut self, task: &Task, plan: &Tensor) -> Result<()> {
        let old = task.num_old_classes();
        let head = self.base.net.head_mut();
        let f = head.feature_dim();
        let rows: Vec<&[f64]> = (0..old).map(|c| head.row(c)).collect();
        let new_rows = transfer_rows(&rows, plan)?;
        let new_bias = head.bias().map(|b| {
            let old_b: Vec<&[f64]> = (0..old).map(|c| &b.data()[c..c + 1]).collect();
            transfer_rows(&old_b, plan)
        });
        if new_rows.iter().flatten().any(|v| !v.is_finite()) || new_rows.iter().any(|r| norm(r) == 0.0) {
            return Err(CilError::invalid("coil: transferred head rows are degenerate"));
        }
        let w = head.weight_mut().expect("expanded head");
        for (j, row) in new_rows.iter().enumerate() {
            w.data_mut()[(old + j) * f..(old + j + 1) * f].copy_from_slice(row);
        }
        if let Some(nb) = new_bias {
            let nb = nb?;
            let b = head.bias_mut().expect("linear head has a bias");
            for (j, v) in nb.iter().enumerate() {
                b.data_mut()[old + j] = v[0];
            }
        }
        Ok(())
    }
}

impl Learner for Coil {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Coil
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.check_task(task)?;
        let plan = match &self.teacher {
            Some(_) if task.num_old_classes() > 0 => Some(self.plan_for(task)?),
            _ => None,
        };
        self.base.begin_task(task)?;
        if let (Some(plan), true) = (&plan, self.cfg.prospective) {
            self.init_new_rows(task, plan)?;
        }

        let pool = self.base.rehearsal_pool(task)?;
        let seed = self.base.task_seed(SEED_TRAIN, task);
        let optim = self.base.optim.clone();
        let distill = self.teacher.as_ref().map(|teacher| Distill {
            teacher,
            temperature: self.cfg.temperature,
            weight: self.cfg.kd_weight.resolve(task),
        });
        let map = plan.as_ref().map(retrospective_map);
        let (old, seen) = (task.num_old_classes(), task.num_seen_classes());
        let (transfer_weight, temperature) = (self.cfg.transfer_weight, self.cfg.temperature);
        let teacher = self.teacher.as_ref();
        let mut retro = |tape: &mut Tape, _: &BoundNet, out: &NetOutput, x: &Tensor, _: &[usize]| -> Result<Option<Var>> {
            let (Some(map), Some(teacher)) = (&map, teacher) else {
                return Ok(None);
            };
            if transfer_weight == 0.0 {
                return Ok(None);
            }
            let logits = out.logits.expect("head was expanded");
            let new_block = tape.slice_cols(logits, old, seen)?;
            let mapped = tape.matmul_const(new_block, map)?;
            let target = teacher.logits(x)?;
            let kd = tape.kd_loss(target.data(), old, mapped, temperature)?;
            tape.scale(kd, transfer_weight).map(Some)
        };
        let log = engine::train(&mut self.base.net, pool.len(), &optim, seed, |net, idx| {
            let extra: &mut ExtraTerm<'_> = &mut retro;
            supervised_step(net, &pool, idx, distill.as_ref(), Some(extra))
        })?;
        self.base.record(task, "train", log);
        self.base.update_memory(task)?;
        self.teacher = Some(Teacher::new(&self.base.net));
        self.plans.extend(plan);
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
