//! Elastic weight consolidation with an online (summed) diagonal Fisher.

use serde::{Deserialize, Serialize};

use super::{
    supervised_step, Algorithm, Base, ExtraTerm, Learner, LearnerConfig, TaskLog, SEED_FISHER, SEED_TRAIN,
};
use crate::autodiff::{Tape, Var};
use crate::engine::{self, StepOutput};
use crate::error::{CilError, Result};
use crate::memory::ExemplarSet;
use crate::model::{BoundNet, CompositeNet, HeadMode, NetOutput, ParamLayout};
use crate::rng;
use crate::stream::{Dataset, Task};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda: f64,
    /// Instances drawn per task for the Fisher estimate.
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        EwcConfig {
            lambda: 100.0,
            fisher_samples: 200,
        }
    }
}

/// `(lambda / 2) * sum_i F_i (theta_i - theta*_i)^2`.
pub fn ewc_penalty(fisher: &[f64], theta: &[f64], theta_star: &[f64], lambda: f64) -> Result<f64> {
    if fisher.len() != theta.len() || theta.len() != theta_star.len() {
        return Err(CilError::Shape {
            op: "ewc_penalty",
            lhs: vec![fisher.len(), theta_star.len()],
            rhs: vec![theta.len()],
        });
    }
    let s: f64 = fisher
        .iter()
        .zip(theta.iter().zip(theta_star))
        .map(|(f, (t, s))| f * (t - s) * (t - s))
        .sum();
    Ok(0.5 * lambda * s)
}

/// Mean squared per-instance gradient over `samples` seeded draws from `0..n`.
/// `grad_fn(i)` returns the gradient of the log-likelihood of instance `i`.
pub fn fisher_diagonal<F>(n: usize, samples: usize, seed: u64, mut grad_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if n == 0 || samples == 0 {
        return Err(CilError::invalid("fisher_diagonal: no samples"));
    }
    let picks: Vec<usize> = rng::permutation(n, seed).into_iter().take(samples).collect();
    let mut acc: Vec<f64> = Vec::new();
    for &i in &picks {
        let g = grad_fn(i)?;
        if acc.is_empty() {
            acc = vec![0.0; g.len()];
        } else if g.len() != acc.len() {
            return Err(CilError::invalid("fisher_diagonal: gradient length changed"));
        }
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += v * v;
        }
    }
    let k = picks.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Anchor parameters and their importance, laid out like
/// [`CompositeNet::parameter_vector`]. Tensors that grew since (head rows and
/// biases) are anchored on their leading entries only.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub fisher: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub layout: ParamLayout,
    pub lambda: f64,
}

impl EwcState {
    /// Penalty of the current parameters of `net`.
    pub fn penalty(&self, net: &CompositeNet) -> Result<f64> {
        let (theta, layout) = net.parameter_vector(true);
        let mut total = 0.0;
        for slot in &self.layout.slots {
            let cur = layout
                .slots
                .iter()
                .find(|s| s.id == slot.id)
                .ok_or_else(|| CilError::invalid(format!("ewc: parameter {:?} vanished", slot.id)))?;
            if cur.len < slot.len {
                return Err(CilError::invalid("ewc: parameter shrank"));
            }
            let r = slot.offset..slot.offset + slot.len;
            total += ewc_penalty(
                &self.fisher[r.clone()],
                &theta[cur.offset..cur.offset + slot.len],
                &self.theta_star[r],
                self.lambda,
            )?;
        }
        Ok(total)
    }

    /// The penalty as a differentiable node.
    pub fn penalty_on_tape(&self, tape: &mut Tape, bound: &BoundNet) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for slot in &self.layout.slots {
            let var = bound
                .trainable_var(slot.id)
                .ok_or_else(|| CilError::invalid(format!("ewc: parameter {:?} is not trainable", slot.id)))?;
            let r = slot.offset..slot.offset + slot.len;
            let term = tape.weighted_sq_distance(var, &self.theta_star[r.clone()], &self.fisher[r])?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        match total {
            Some(t) => Ok(Some(tape.scale(t, 0.5 * self.lambda)?)),
            None => Ok(None),
        }
    }

    /// Adds a new task's Fisher (laid out as the current net) and re-anchors.
    fn accumulate(prev: Option<&EwcState>, net: &CompositeNet, task_fisher: Vec<f64>, lambda: f64) -> EwcState {
        let (theta, layout) = net.parameter_vector(true);
        let mut fisher = task_fisher;
        if let Some(prev) = prev {
            for slot in &prev.layout.slots {
                if let Some(cur) = layout.slots.iter().find(|s| s.id == slot.id) {
                    for k in 0..slot.len.min(cur.len) {
                        fisher[cur.offset + k] += prev.fisher[slot.offset + k];
                    }
                }
            }
        }
        EwcState {
            fisher,
            theta_star: theta,
            layout,
            lambda,
        }
    }
}

/// Per-instance gradient of the negative log-likelihood of the observed label.
fn instance_gradient(net: &CompositeNet, data: &Dataset, i: usize) -> Result<Vec<f64>> {
    let (x, y) = data.gather(&[i])?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape)?;
    let xv = tape.constant(&x)?;
    let out = net.forward(&mut tape, &bound, xv)?;
    let logits = out
        .logits
        .ok_or_else(|| CilError::invalid("network head has no classes"))?;
    let loss = tape.softmax_cross_entropy(logits, &y)?;
    let step = StepOutput::from_tape(&mut tape, loss, bound.trainable())?;
    Ok(super::flatten(&step.grads))
}

#[derive(Debug, Clone)]
pub struct Ewc {
    base: Base,
    cfg: EwcConfig,
    state: Option<EwcState>,
}

impl Ewc {
    pub fn new(cfg: &LearnerConfig, ewc: EwcConfig) -> Result<Self> {
        if !(ewc.lambda >= 0.0) || ewc.fisher_samples == 0 {
            return Err(CilError::invalid("ewc: lambda must be >= 0 and fisher_samples positive"));
        }
        Ok(Ewc {
            base: Base::new(cfg, HeadMode::Linear, false)?,
            cfg: ewc,
            state: None,
        })
    }

    pub fn state(&self) -> Option<&EwcState> {
        self.state.as_ref()
    }
}

impl Learner for Ewc {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Ewc
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        let seed = self.base.task_seed(SEED_TRAIN, task);
        let optim = self.base.optim.clone();
        let data = &task.train;
        let state = self.state.as_ref();
        let mut penalty = |tape: &mut Tape, bound: &BoundNet, _: &NetOutput, _: &Tensor, _: &[usize]| match state {
            Some(s) if s.lambda > 0.0 => s.penalty_on_tape(tape, bound),
            _ => Ok(None),
        };
        let log = engine::train(&mut self.base.net, data.len(), &optim, seed, |net, idx| {
            let extra: &mut ExtraTerm<'_> = &mut penalty;
            supervised_step(net, data, idx, None, Some(extra))
        })?;
        self.base.record(task, "train", log);

        let net = &self.base.net;
        let fisher = fisher_diagonal(
            data.len(),
            self.cfg.fisher_samples,
            self.base.task_seed(SEED_FISHER, task),
            |i| instance_gradient(net, data, i),
        )?;
        self.state = Some(EwcState::accumulate(self.state.as_ref(), net, fisher, self.cfg.lambda));
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneSpec;

    #[test]
    fn penalty_example() {
        let p = ewc_penalty(&[1.0, 4.0], &[1.0, 0.5], &[0.0, 0.0], 2.0).unwrap();
        assert!((p - 2.0).abs() < 1e-15);
        assert_eq!(ewc_penalty(&[1.0; 3], &[0.3; 3], &[0.3; 3], 7.0).unwrap(), 0.0);
        assert!(ewc_penalty(&[1.0], &[1.0, 2.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn fisher_of_one_parameter_logistic_model() {
        // p(y=1|x) = sigmoid(w x), d/dw log p(y|x) = (y - sigmoid(w x)) x
        let xs = [0.5, -1.0, 2.0, 1.5];
        let ys = [1.0, 0.0, 1.0, 0.0];
        let w = 0.3;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let fisher = fisher_diagonal(4, 4, 9, |i| Ok(vec![(ys[i] - sig(w * xs[i])) * xs[i]])).unwrap();
        let expected: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| ((y - sig(w * x)) * x).powi(2))
            .sum::<f64>()
            / 4.0;
        assert!((fisher[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn tape_penalty_matches_value_and_grows_with_head() {
        let spec = BackboneSpec::new("t", 3, vec![4]).unwrap();
        let mut net = CompositeNet::build(spec, HeadMode::Linear, 1).unwrap();
        net.expand_head(2, 2).unwrap();
        let n = net.parameter_count(true);
        let fisher: Vec<f64> = (0..n).map(|i| 0.1 + i as f64 * 0.01).collect();
        let state = EwcState::accumulate(None, &net, fisher, 3.0);
        assert_eq!(state.penalty(&net).unwrap(), 0.0);

        net.expand_head(2, 3).unwrap();
        let (mut theta, layout) = net.parameter_vector(true);
        theta.iter_mut().for_each(|t| *t += 0.25);
        net.write_parameter_vector(&layout, &theta).unwrap();

        let expected = 0.5 * 3.0 * state.fisher.iter().map(|f| f * 0.0625).sum::<f64>();
        assert!((state.penalty(&net).unwrap() - expected).abs() < 1e-12);

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape).unwrap();
        let v = state.penalty_on_tape(&mut tape, &bound).unwrap().unwrap();
        assert!((tape.value(v).item() - expected).abs() < 1e-12);
    }
}
