//! Class-incremental learning strategies behind one [`Learner`] interface.
//!
//! A learner sees the tasks of a stream one at a time through
//! [`Learner::observe`] and never receives earlier tasks again; anything it
//! keeps from the past lives in its network, its snapshots or its
//! [`ExemplarSet`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::engine::{self, EpochRecord, OptimConfig, StepOutput};
use crate::error::{CilError, Result};
use crate::memory::{ExemplarSet, NewClassData};
use crate::metrics::{argmax, per_group_accuracy, stage_accuracy, GroupAccuracy};
use crate::model::{BackboneSpec, BoundNet, CompositeNet, HeadMode, NetOutput};
use crate::rng::derive_seed;
use crate::stream::{Dataset, Task, TaskStream};
use crate::tensor::Tensor;

pub mod bic;
pub mod coil;
pub mod der;
pub mod ewc;
pub mod finetune;
pub mod gem;
pub mod icarl;
pub mod lwf;
pub mod ot;
pub mod podnet;
pub mod wa;

pub use bic::{BiCLayer, Bic, BicConfig};
pub use coil::{Coil, CoilConfig};
pub use der::{Der, DerConfig};
pub use ewc::{Ewc, EwcConfig, EwcState};
pub use finetune::{Finetune, Replay, ReplayConfig};
pub use gem::{gem_project, Gem, GemConfig, GemState};
pub use icarl::Icarl;
pub use lwf::Lwf;
pub use ot::sinkhorn;
pub use podnet::{PodConfig, Podnet};
pub use wa::{wa_align, Wa};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Finetune,
    Replay,
    Ewc,
    Lwf,
    Icarl,
    Gem,
    Bic,
    Wa,
    Podnet,
    Der,
    Coil,
}

impl Algorithm {
    pub const ALL: [Algorithm; 11] = [
        Algorithm::Finetune,
        Algorithm::Replay,
        Algorithm::Ewc,
        Algorithm::Lwf,
        Algorithm::Icarl,
        Algorithm::Gem,
        Algorithm::Bic,
        Algorithm::Wa,
        Algorithm::Podnet,
        Algorithm::Der,
        Algorithm::Coil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Finetune => "finetune",
            Algorithm::Replay => "replay",
            Algorithm::Ewc => "ewc",
            Algorithm::Lwf => "lwf",
            Algorithm::Icarl => "icarl",
            Algorithm::Gem => "gem",
            Algorithm::Bic => "bic",
            Algorithm::Wa => "wa",
            Algorithm::Podnet => "podnet",
            Algorithm::Der => "der",
            Algorithm::Coil => "coil",
        }
    }

    /// Whether the strategy keeps an exemplar memory.
    pub fn uses_memory(self) -> bool {
        !matches!(self, Algorithm::Finetune | Algorithm::Ewc | Algorithm::Lwf)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = CilError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CilError::invalid(format!("unknown algorithm '{s}'")))
    }
}

/// Distillation weight: a constant, or `|Y_old| / |Y_seen|` of the current task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KdWeight {
    Fixed(f64),
    Named(KdWeightName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdWeightName {
    Adaptive,
}

impl KdWeight {
    pub const ADAPTIVE: KdWeight = KdWeight::Named(KdWeightName::Adaptive);

    pub fn resolve(self, task: &Task) -> f64 {
        match self {
            KdWeight::Fixed(w) => w,
            KdWeight::Named(KdWeightName::Adaptive) => {
                task.num_old_classes() as f64 / task.num_seen_classes() as f64
            }
        }
    }
}

/// Temperature and weight of the logit distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub kd_weight: KdWeight,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            kd_weight: KdWeight::ADAPTIVE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "name")]
pub enum AlgorithmConfig {
    Finetune,
    Replay(ReplayConfig),
    Ewc(EwcConfig),
    Lwf(DistillConfig),
    Icarl(DistillConfig),
    Gem(GemConfig),
    Bic(BicConfig),
    Wa(DistillConfig),
    Podnet(PodConfig),
    Der(DerConfig),
    Coil(CoilConfig),
}

impl AlgorithmConfig {
    pub fn default_for(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::Finetune => AlgorithmConfig::Finetune,
            Algorithm::Replay => AlgorithmConfig::Replay(ReplayConfig::default()),
            Algorithm::Ewc => AlgorithmConfig::Ewc(EwcConfig::default()),
            Algorithm::Lwf => AlgorithmConfig::Lwf(DistillConfig::default()),
            Algorithm::Icarl => AlgorithmConfig::Icarl(DistillConfig::default()),
            Algorithm::Gem => AlgorithmConfig::Gem(GemConfig::default()),
            Algorithm::Bic => AlgorithmConfig::Bic(BicConfig::default()),
            Algorithm::Wa => AlgorithmConfig::Wa(DistillConfig::default()),
            Algorithm::Podnet => AlgorithmConfig::Podnet(PodConfig::default()),
            Algorithm::Der => AlgorithmConfig::Der(DerConfig::default()),
            Algorithm::Coil => AlgorithmConfig::Coil(CoilConfig::default()),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            AlgorithmConfig::Finetune => Algorithm::Finetune,
            AlgorithmConfig::Replay(_) => Algorithm::Replay,
            AlgorithmConfig::Ewc(_) => Algorithm::Ewc,
            AlgorithmConfig::Lwf(_) => Algorithm::Lwf,
            AlgorithmConfig::Icarl(_) => Algorithm::Icarl,
            AlgorithmConfig::Gem(_) => Algorithm::Gem,
            AlgorithmConfig::Bic(_) => Algorithm::Bic,
            AlgorithmConfig::Wa(_) => Algorithm::Wa,
            AlgorithmConfig::Podnet(_) => Algorithm::Podnet,
            AlgorithmConfig::Der(_) => Algorithm::Der,
            AlgorithmConfig::Coil(_) => Algorithm::Coil,
        }
    }
}

/// Everything needed to construct a learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub backbone: BackboneSpec,
    pub optim: OptimConfig,
    pub memory_size: usize,
    pub seed: u64,
    pub algorithm: AlgorithmConfig,
}

/// Training log of one phase of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub phase: String,
    pub epochs: Vec<EpochRecord>,
}

pub trait Learner: Send {
    fn algorithm(&self) -> Algorithm;

    /// Learns the next task of the stream.
    fn observe(&mut self, task: &Task) -> Result<()>;

    /// Predicted labels over all classes seen so far.
    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>>;

    fn num_seen_classes(&self) -> usize;

    fn memory(&self) -> Option<&ExemplarSet>;

    fn network(&self) -> &CompositeNet;

    fn train_logs(&self) -> &[TaskLog];
}

pub fn build_learner(cfg: &LearnerConfig) -> Result<Box<dyn Learner>> {
    Ok(match &cfg.algorithm {
        AlgorithmConfig::Finetune => Box::new(Finetune::new(cfg)?),
        AlgorithmConfig::Replay(c) => Box::new(Replay::new(cfg, c.clone())?),
        AlgorithmConfig::Ewc(c) => Box::new(Ewc::new(cfg, c.clone())?),
        AlgorithmConfig::Lwf(c) => Box::new(Lwf::new(cfg, *c)?),
        AlgorithmConfig::Icarl(c) => Box::new(Icarl::new(cfg, *c)?),
        AlgorithmConfig::Gem(c) => Box::new(Gem::new(cfg, c.clone())?),
        AlgorithmConfig::Bic(c) => Box::new(Bic::new(cfg, c.clone())?),
        AlgorithmConfig::Wa(c) => Box::new(Wa::new(cfg, *c)?),
        AlgorithmConfig::Podnet(c) => Box::new(Podnet::new(cfg, c.clone())?),
        AlgorithmConfig::Der(c) => Box::new(Der::new(cfg, c.clone())?),
        AlgorithmConfig::Coil(c) => Box::new(Coil::new(cfg, c.clone())?),
    })
}

/// Everything measured while driving a learner through a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamOutcome {
    /// `A_b` on the test data of all classes seen up to stage `b`.
    pub stage_accuracies: Vec<f64>,
    pub groups: Vec<GroupAccuracy>,
    /// `task_accuracies[b][k]`: accuracy at stage `b` on the test data of task `k <= b`.
    pub task_accuracies: Vec<Vec<f64>>,
    pub seen_classes: Vec<usize>,
    pub memory_sizes: Vec<usize>,
}

/// Observes every task in order and evaluates after each one.
pub fn run_stream(learner: &mut dyn Learner, stream: &TaskStream) -> Result<StreamOutcome> {
    let mut out = StreamOutcome {
        stage_accuracies: Vec::new(),
        groups: Vec::new(),
        task_accuracies: Vec::new(),
        seen_classes: Vec::new(),
        memory_sizes: Vec::new(),
    };
    for (b, task) in stream.tasks().iter().enumerate() {
        let stage = |e| CilError::at_stage(b + 1, e);
        learner.observe(task).map_err(stage)?;
        let pool = stream.eval_pool(b).map_err(stage)?;
        let preds = learner.predict(pool.instances()).map_err(stage)?;
        let space = learner.num_seen_classes();
        if let Some(&p) = preds.iter().find(|&&p| p >= space) {
            return Err(stage(CilError::invalid(format!(
                "prediction {p} lies outside the {space} seen classes"
            ))));
        }
        out.stage_accuracies.push(stage_accuracy(&preds, pool.labels()).map_err(stage)?);
        let old = task.num_old_classes();
        out.groups
            .push(per_group_accuracy(&preds, pool.labels(), |l| l < old).map_err(stage)?);
        let mut per_task = Vec::with_capacity(b + 1);
        for past in &stream.tasks()[..=b] {
            let p = learner.predict(past.test.instances()).map_err(stage)?;
            per_task.push(stage_accuracy(&p, past.test.labels()).map_err(stage)?);
        }
        out.task_accuracies.push(per_task);
        out.seen_classes.push(learner.num_seen_classes());
        out.memory_sizes.push(learner.memory().map_or(0, ExemplarSet::len));
    }
    Ok(out)
}

// Seed tags: every random draw of a learner is keyed by (seed, tag, task).
pub(crate) const SEED_NET: u64 = 0;
pub(crate) const SEED_HEAD: u64 = 1;
pub(crate) const SEED_TRAIN: u64 = 2;
pub(crate) const SEED_FISHER: u64 = 3;
pub(crate) const SEED_SPLIT: u64 = 4;
pub(crate) const SEED_BIAS: u64 = 5;
pub(crate) const SEED_BRANCH: u64 = 6;
pub(crate) const SEED_AUX: u64 = 7;
pub(crate) const SEED_BALANCE: u64 = 8;

/// State shared by every strategy.
#[derive(Debug, Clone)]
pub(crate) struct Base {
    pub net: CompositeNet,
    pub spec: BackboneSpec,
    pub optim: OptimConfig,
    pub seed: u64,
    pub memory: Option<ExemplarSet>,
    pub seen: usize,
    pub tasks_seen: usize,
    pub logs: Vec<TaskLog>,
}

impl Base {
    pub fn new(cfg: &LearnerConfig, mode: HeadMode, with_memory: bool) -> Result<Self> {
        cfg.optim.validate()?;
        let net = CompositeNet::build(cfg.backbone.clone(), mode, derive_seed(cfg.seed, &[SEED_NET]))?;
        Ok(Base {
            net,
            spec: cfg.backbone.clone(),
            optim: cfg.optim.clone(),
            seed: cfg.seed,
            memory: if with_memory {
                Some(ExemplarSet::new(cfg.memory_size)?)
            } else {
                None
            },
            seen: 0,
            tasks_seen: 0,
            logs: Vec::new(),
        })
    }

    pub fn task_seed(&self, tag: u64, task: &Task) -> u64 {
        derive_seed(self.seed, &[tag, task.index as u64])
    }

    pub fn check_task(&self, task: &Task) -> Result<()> {
        if task.index != self.tasks_seen || task.label_range.start != self.seen {
            return Err(CilError::invalid(format!(
                "expected task {} starting at class {}, got task {} starting at {}",
                self.tasks_seen, self.seen, task.index, task.label_range.start
            )));
        }
        if task.train.is_empty() {
            return Err(CilError::invalid(format!("task {} has no training data", task.index)));
        }
        Ok(())
    }

    /// Validates the task and grows the head by its new classes.
    pub fn begin_task(&mut self, task: &Task) -> Result<()> {
        self.check_task(task)?;
        let seed = self.task_seed(SEED_HEAD, task);
        self.net.expand_head(task.num_new_classes(), seed)
    }

    pub fn finish_task(&mut self, task: &Task) {
        self.seen = task.num_seen_classes();
        self.tasks_seen += 1;
    }

    pub fn record(&mut self, task: &Task, phase: &str, log: engine::TrainLog) {
        self.logs.push(TaskLog {
            task: task.index,
            phase: phase.to_string(),
            epochs: log.epochs,
        });
    }

    /// Current task data merged with every stored exemplar.
    pub fn rehearsal_pool(&self, task: &Task) -> Result<Dataset> {
        match &self.memory {
            Some(mem) => finetune::rehearsal_pool(&task.train, mem, task.num_seen_classes(), false),
            None => Ok(task.train.clone()),
        }
    }

    /// Herding update of the memory with this task's classes.
    pub fn update_memory(&mut self, task: &Task) -> Result<()> {
        let Some(memory) = self.memory.as_mut() else {
            return Ok(());
        };
        let new: Vec<NewClassData> = task
            .label_range
            .clone()
            .map(|c| NewClassData::from_dataset(&task.train, c))
            .collect::<Result<_>>()?;
        let net = &self.net;
        memory.update(&new, task.num_seen_classes(), |x| net.features(x))
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.tasks_seen == 0 {
            return Err(CilError::invalid("predict called before any task was observed"));
        }
        Ok(())
    }

    pub fn predict_argmax(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.require_trained()?;
        predict_argmax(&self.net, batch)
    }
}

pub(crate) fn predict_argmax(net: &CompositeNet, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = net.logits(batch)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

/// Frozen copy of the network from the end of the previous task.
#[derive(Debug, Clone)]
pub(crate) struct Teacher {
    pub net: CompositeNet,
    pub classes: usize,
    pub bias_layers: Vec<BiCLayer>,
}

impl Teacher {
    pub fn new(net: &CompositeNet) -> Self {
        Teacher {
            net: net.clone(),
            classes: net.num_classes(),
            bias_layers: Vec::new(),
        }
    }

    /// Row-major (batch, classes) logits, with any bias correction applied.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.net.logits(x)?;
        for layer in &self.bias_layers {
            layer.apply_in_place(&mut z);
        }
        Ok(z)
    }
}

pub(crate) struct Distill<'a> {
    pub teacher: &'a Teacher,
    pub temperature: f64,
    pub weight: f64,
}

/// Extra loss terms a strategy adds on top of cross-entropy (+ distillation).
pub(crate) type ExtraTerm<'a> =
    dyn FnMut(&mut Tape, &BoundNet, &NetOutput, &Tensor, &[usize]) -> Result<Option<Var>> + 'a;

/// One minibatch of cross-entropy over all seen classes, plus optional
/// logit distillation and strategy-specific terms.
pub(crate) fn supervised_step(
    net: &CompositeNet,
    data: &Dataset,
    idx: &[usize],
    distill: Option<&Distill<'_>>,
    extra: Option<&mut ExtraTerm<'_>>,
) -> Result<StepOutput> {
    let (x, y) = data.gather(idx)?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape)?;
    let xv = tape.constant(&x)?;
    let out = net.forward(&mut tape, &bound, xv)?;
    let logits = out
        .logits
        .ok_or_else(|| CilError::invalid("network head has no classes"))?;
    let mut loss = tape.softmax_cross_entropy(logits, &y)?;
    if let Some(d) = distill {
        if d.weight != 0.0 {
            let old = d.teacher.logits(&x)?;
            let kd = tape.kd_loss(old.data(), d.teacher.classes, logits, d.temperature)?;
            let kd = tape.scale(kd, d.weight)?;
            loss = tape.add(loss, kd)?;
        }
    }
    if let Some(extra) = extra {
        if let Some(term) = extra(&mut tape, &bound, &out, &x, &y)? {
            loss = tape.add(loss, term)?;
        }
    }
    StepOutput::from_tape(&mut tape, loss, bound.trainable())
}

/// Trains `net` on `data` with cross-entropy (+ distillation) and logs the phase.
pub(crate) fn fit_supervised(
    base: &mut Base,
    task: &Task,
    phase: &str,
    data: &Dataset,
    distill: Option<&Distill<'_>>,
) -> Result<()> {
    let seed = base.task_seed(SEED_TRAIN, task);
    let optim = base.optim.clone();
    let log = engine::train(&mut base.net, data.len(), &optim, seed, |net, idx| {
        supervised_step(net, data, idx, distill, None)
    })?;
    base.record(task, phase, log);
    Ok(())
}

/// Gradient of every trainable parameter, flattened in [`Trainable::params`] order.
pub(crate) fn flatten(grads: &[Vec<f64>]) -> Vec<f64> {
    grads.concat()
}

pub(crate) fn unflatten(flat: &[f64], like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(like.len());
    let mut offset = 0;
    for g in like {
        out.push(flat[offset..offset + g.len()].to_vec());
        offset += g.len();
    }
    out
}
