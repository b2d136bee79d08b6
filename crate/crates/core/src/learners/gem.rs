//! Gradient episodic memory: the update direction is projected so that it
//! does not increase the loss on any earlier task's exemplars.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{flatten, supervised_step, unflatten, Algorithm, Base, Learner, LearnerConfig, TaskLog, SEED_TRAIN};
use crate::engine::{self, StepOutput};
use crate::error::{CilError, Result};
use crate::linalg::dot;
use crate::memory::ExemplarSet;
use crate::model::{CompositeNet, HeadMode};
use crate::stream::{Dataset, Task};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GemConfig {
    /// Projection is skipped while every `<g, G_k>` is at least `-margin`.
    pub margin: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for GemConfig {
    fn default() -> Self {
        GemConfig {
            margin: 0.0,
            max_iters: 2_000,
            tolerance: 1e-12,
        }
    }
}

/// Class ranges of the earlier tasks, one constraint each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GemState {
    pub task_ranges: Vec<Range<usize>>,
}

/// Projects `g` onto `{x : <x, G_k> >= 0 for all k}` in the Euclidean sense
/// when some `<g, G_k>` falls below `-margin`; otherwise returns `g`.
///
/// The dual `min_{v >= 0} 1/2 v'(G G')v + (G g)'v` is solved by projected
/// gradient descent from `v = 0` with step `1 / ||G G'||_F`; every few steps
/// the reduced system on the current support is solved exactly and accepted
/// if it satisfies the KKT conditions. Badly conditioned duals that are still
/// unsolved after `max_iters` steps are finished by an active-set method.
/// The primal answer is `g + G'v`.
pub fn gem_project(g: &[f64], constraints: &[Vec<f64>], margin: f64) -> Result<Vec<f64>> {
    let cfg = GemConfig {
        margin,
        ..GemConfig::default()
    };
    gem_project_with(g, constraints, &cfg)
}

pub fn gem_project_with(g: &[f64], constraints: &[Vec<f64>], cfg: &GemConfig) -> Result<Vec<f64>> {
    if g.iter().any(|v| !v.is_finite()) || constraints.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CilError::NonFinite { op: "gem_project" });
    }
    if let Some(bad) = constraints.iter().find(|c| c.len() != g.len()) {
        return Err(CilError::Shape {
            op: "gem_project",
            lhs: vec![g.len()],
            rhs: vec![bad.len()],
        });
    }
    let q: Vec<f64> = constraints.iter().map(|c| dot(c, g)).collect();
    if q.iter().all(|&d| d >= -cfg.margin) {
        return Ok(g.to_vec());
    }
    let t = constraints.len();
    let mut p = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let v = dot(&constraints[i], &constraints[j]);
            p[i * t + j] = v;
            p[j * t + i] = v;
        }
    }
    let lipschitz = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let step = 1.0 / lipschitz;
    let tol = cfg.tolerance * lipschitz.max(1.0);
    let mut v = vec![0.0; t];
    let mut residual = f64::INFINITY;
    let mut solution = None;
    for iter in 0..cfg.max_iters {
        let grad = dual_gradient(&p, &q, &v);
        residual = natural_residual(&v, &grad);
        if residual <= tol {
            solution = Some(v.clone());
            break;
        }
        if iter % POLISH_EVERY == POLISH_EVERY - 1 {
            if let Some(exact) = polish(&p, &q, &v, tol) {
                solution = Some(exact);
                break;
            }
        }
        for i in 0..t {
            v[i] = (v[i] - step * grad[i]).max(0.0);
        }
    }
    let solution = solution.or_else(|| active_set(&p, &q, tol));
    let Some(v) = solution else {
        return Err(CilError::NotConverged {
            iters: cfg.max_iters,
            residual,
        });
    };
    let mut out = g.to_vec();
    for (k, c) in constraints.iter().enumerate() {
        if v[k] != 0.0 {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += v[k] * ci;
            }
        }
    }
    Ok(out)
}

const POLISH_EVERY: usize = 20;

fn dual_gradient(p: &[f64], q: &[f64], v: &[f64]) -> Vec<f64> {
    let t = q.len();
    (0..t)
        .map(|i| q[i] + (0..t).map(|j| p[i * t + j] * v[j]).sum::<f64>())
        .collect()
}

/// `||v - max(0, v - grad)||_inf`, zero exactly at a KKT point.
fn natural_residual(v: &[f64], grad: &[f64]) -> f64 {
    v.iter()
        .zip(grad)
        .map(|(&vi, &gi)| (vi - (vi - gi).max(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Solves the dual restricted to the support of `v` exactly and keeps the
/// answer only if it is a KKT point of the full problem.
fn polish(p: &[f64], q: &[f64], v: &[f64], tol: f64) -> Option<Vec<f64>> {
    let t = q.len();
    let active: Vec<usize> = (0..t).filter(|&i| v[i] > 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let k = active.len();
    let mut a: Vec<f64> = Vec::with_capacity(k * k);
    for &i in &active {
        a.extend(active.iter().map(|&j| p[i * t + j]));
    }
    let rhs: Vec<f64> = active.iter().map(|&i| -q[i]).collect();
    let x = solve_dense(a, rhs)?;
    if x.iter().any(|&xi| !(xi >= 0.0)) {
        return None;
    }
    let mut full = vec![0.0; t];
    for (&i, &xi) in active.iter().zip(&x) {
        full[i] = xi;
    }
    let grad = dual_gradient(p, q, &full);
    (natural_residual(&full, &grad) <= tol).then_some(full)
}

/// Finite active-set method for the dual: grows a free set by the most
/// negative gradient entry and backtracks whenever a free variable would turn
/// negative. Returns `None` on a singular reduced system.
fn active_set(p: &[f64], q: &[f64], tol: f64) -> Option<Vec<f64>> {
    let t = q.len();
    let mut v = vec![0.0; t];
    let mut free = vec![false; t];
    for _ in 0..10 * t + 10 {
        let grad = dual_gradient(p, q, &v);
        let candidate = (0..t)
            .filter(|&i| !free[i] && grad[i] < -tol)
            .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let Some(j) = candidate else {
            return (natural_residual(&v, &grad) <= tol).then_some(v);
        };
        free[j] = true;
        loop {
            let idx: Vec<usize> = (0..t).filter(|&i| free[i]).collect();
            let k = idx.len();
            let mut a = Vec::with_capacity(k * k);
            for &r in &idx {
                a.extend(idx.iter().map(|&c| p[r * t + c]));
            }
            let z = solve_dense(a, idx.iter().map(|&r| -q[r]).collect())?;
            if z.iter().all(|&zi| zi > 0.0) {
                for (&i, &zi) in idx.iter().zip(&z) {
                    v[i] = zi;
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (&i, &zi) in idx.iter().zip(&z) {
                if zi <= 0.0 {
                    alpha = alpha.min(v[i] / (v[i] - zi));
                }
            }
            for (&i, &zi) in idx.iter().zip(&z) {
                v[i] += alpha * (zi - v[i]);
                if v[i] <= 0.0 || (zi <= 0.0 && v[i] <= tol) {
                    v[i] = 0.0;
                    free[i] = false;
                }
            }
            if !free.iter().any(|&f| f) {
                break;
            }
        }
    }
    None
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))?;
        if a[piv * n + col].abs() <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(piv * n + c, col * n + c);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r * n + c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

#[derive(Debug, Clone)]
pub struct Gem {
    base: Base,
    cfg: GemConfig,
    state: GemState,
}

impl Gem {
    pub fn new(cfg: &LearnerConfig, gem: GemConfig) -> Result<Self> {
        if !(gem.margin >= 0.0) || gem.max_iters == 0 || !(gem.tolerance > 0.0) {
            return Err(CilError::invalid("gem: margin must be >= 0, max_iters and tolerance positive"));
        }
        Ok(Gem {
            base: Base::new(cfg, HeadMode::Linear, true)?,
            cfg: gem,
            state: GemState::default(),
        })
    }

    pub fn state(&self) -> &GemState {
        &self.state
    }
}

fn full_gradient(net: &CompositeNet, data: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(flatten(&supervised_step(net, data, &idx, None, None)?.grads))
}

impl Learner for Gem {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Gem
    }

    fn observe(&mut self, task: &Task) -> Result<()> {
        self.base.begin_task(task)?;
        let memory = self.base.memory.as_ref().expect("gem keeps a memory");
        let episodes: Vec<Dataset> = self
            .state
            .task_ranges
            .iter()
            .map(|r| {
                let classes: Vec<usize> = r.clone().collect();
                memory
                    .to_dataset(task.num_seen_classes(), Some(&classes))?
                    .ok_or_else(|| CilError::invalid("gem: an earlier task has no exemplars"))
            })
            .collect::<Result<_>>()?;

        let seed = self.base.task_seed(SEED_TRAIN, task);
        let optim = self.base.optim.clone();
        let cfg = &self.cfg;
        let data = &task.train;
        let log = engine::train(&mut self.base.net, data.len(), &optim, seed, |net, idx| {
            let step = supervised_step(net, data, idx, None, None)?;
            if episodes.is_empty() {
                return Ok(step);
            }
            let constraints: Vec<Vec<f64>> = episodes
                .iter()
                .map(|e| full_gradient(net, e))
                .collect::<Result<_>>()?;
            let projected = gem_project_with(&flatten(&step.grads), &constraints, cfg)?;
            Ok(StepOutput {
                loss: step.loss,
                grads: unflatten(&projected, &step.grads),
            })
        })?;
        self.base.record(task, "train", log);
        self.base.update_memory(task)?;
        self.state.task_ranges.push(task.label_range.clone());
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

    #[test]
    fn no_violation_returns_input() {
        let g = vec![1.0, 2.0, -0.5];
        let out = gem_project(&g, &[vec![0.5, 0.1, 0.0], vec![0.0, 1.0, 1.0]], 0.0).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn single_constraint_has_closed_form() {
        // one violated constraint: g~ = g - (<g,c>/<c,c>) c
        let g = [1.0, -2.0];
        let c = vec![0.0, 1.0];
        let out = gem_project(&g, &[c], 0.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-9);
    }

    #[test]
    fn margin_is_a_violation_slack() {
        let g = [1.0, -0.3];
        let c = vec![0.0, 1.0];
        assert_eq!(gem_project(&g, std::slice::from_ref(&c), 0.5).unwrap(), g.to_vec());
        assert_ne!(gem_project(&g, &[c], 0.0).unwrap(), g.to_vec());
    }

    #[test]
    fn badly_conditioned_dual_is_solved() {
        let p = [
            16.41486660973746, 2.2917378421715187, 9.282026776294053, -0.004515531789168475,
            2.2917378421715187, 8.711149594155103, 2.3598965862537185, -0.0017631174430854668,
            9.282026776294053, 2.3598965862537185, 42.87046773043145, -0.0029890021126513693,
            -0.004515531789168475, -0.0017631174430854668, -0.0029890021126513693, 4.728008265310533e-6,
        ];
        let q = [8.190354529826664, 2.9334229101792477, 9.635923871122985, -0.008393049954338377];
        let v = active_set(&p, &q, 1e-10).unwrap();
        assert!(v.iter().all(|&x| x >= 0.0));
        assert!(natural_residual(&v, &dual_gradient(&p, &q, &v)) <= 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(gem_project(&[f64::NAN], &[vec![1.0]], 0.0).is_err());
        assert!(gem_project(&[1.0, 2.0], &[vec![1.0]], 0.0).is_err());
    }
}
