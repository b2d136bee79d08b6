//! Backbones, growable classifier heads and the multi-branch network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::engine::Trainable;
use crate::error::{CilError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Names accepted for the backbone ("convnet type") and their hidden widths.
pub const BACKBONE_REGISTRY: &[(&str, &[usize])] = &[
    ("mlp-32", &[32]),
    ("mlp-64", &[64]),
    ("mlp-32x32", &[32, 32]),
    ("mlp-64x32", &[64, 32]),
    ("mlp-64x64", &[64, 64]),
    ("mlp-128x64", &[128, 64]),
    ("mlp-128x128", &[128, 128]),
    ("mlp-256x128", &[256, 128]),
    ("mlp-64x64x64", &[64, 64, 64]),
];

/// A relu MLP feature extractor description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl BackboneSpec {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        let spec = BackboneSpec {
            name: name.into(),
            input_dim,
            hidden_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Looks up a registered backbone name.
    pub fn from_registry(name: &str, input_dim: usize) -> Result<Self> {
        let (_, dims) = BACKBONE_REGISTRY
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                let known: Vec<&str> = BACKBONE_REGISTRY.iter().map(|(n, _)| *n).collect();
                CilError::invalid(format!(
                    "unknown backbone '{name}', expected one of {}",
                    known.join(", ")
                ))
            })?;
        BackboneSpec::new(name, input_dim, dims.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(CilError::invalid(format!(
                "backbone '{}' has no hidden layers",
                self.name
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(CilError::invalid(format!(
                "backbone '{}' has a zero-width layer",
                self.name
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (in, out)
    pub weight: Tensor,
    /// (out)
    pub bias: Tensor,
}

impl Linear {
    /// He-style fan-in uniform weights, zero bias.
    pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x W + b` on a tape, using already-bound weight and bias vars.
    pub fn apply(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let z = tape.matmul(x, weight)?;
        tape.add_bias(z, bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    layers: Vec<Linear>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::rng(seed);
        let mut fan_in = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.hidden_dims.len());
        for &h in &spec.hidden_dims {
            layers.push(Linear::he_uniform(fan_in, h, &mut r));
            fan_in = h;
        }
        Ok(Backbone { spec, layers })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadMode {
    Linear,
    /// Scaled cosine similarity; no bias.
    Cosine { scale: f64 },
}

/// Classifier whose class count only grows.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalHead {
    feature_dim: usize,
    mode: HeadMode,
    /// (num_classes, feature_dim); `None` until the first expansion.
    weight: Option<Tensor>,
    bias: Option<Tensor>,
}

impl IncrementalHead {
    pub fn new(feature_dim: usize, mode: HeadMode) -> Self {
        IncrementalHead {
            feature_dim,
            mode,
            weight: None,
            bias: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.as_ref().map_or(0, |w| w.rows())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        self.weight.as_mut()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    pub fn weight_and_bias_mut(&mut self) -> (Option<&mut Tensor>, Option<&mut Tensor>) {
        (self.weight.as_mut(), self.bias.as_mut())
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.weight.as_ref().expect("non-empty head").row(class)
    }

    /// Appends `n_new` seeded rows (uniform in ±1/sqrt(feature_dim)) and zero biases.
    pub fn expand(&mut self, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(CilError::invalid("expand_head: n_new must be at least 1"));
        }
        let f = self.feature_dim;
        let bound = 1.0 / (f as f64).sqrt();
        let mut r = rng::rng(seed);
        let fresh: Vec<f64> = (0..n_new * f).map(|_| r.gen_range(-bound..bound)).collect();
        let old = self.num_classes();
        let mut w = self.weight.take().map(Tensor::into_data).unwrap_or_default();
        w.extend(fresh);
        self.weight = Some(Tensor::from_parts(vec![old + n_new, f], w));
        if let HeadMode::Linear = self.mode {
            let mut b = self.bias.take().map(Tensor::into_data).unwrap_or_default();
            b.extend(std::iter::repeat_n(0.0, n_new));
            self.bias = Some(Tensor::from_parts(vec![old + n_new], b));
        }
        Ok(())
    }

    /// Rebuilds the head for a wider feature vector: old columns keep their
    /// weights, the `extra` new columns start at zero.
    fn widen(&mut self, extra: usize) {
        let old_f = self.feature_dim;
        let new_f = old_f + extra;
        if let Some(w) = self.weight.take() {
            let rows = w.rows();
            let mut data = Vec::with_capacity(rows * new_f);
            for r in 0..rows {
                data.extend_from_slice(w.row(r));
                data.extend(std::iter::repeat_n(0.0, extra));
            }
            self.weight = Some(Tensor::from_parts(vec![rows, new_f], data));
        }
        self.feature_dim = new_f;
    }

    /// Logits for already-computed features.
    pub fn apply(&self, tape: &mut Tape, features: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        match self.mode {
            HeadMode::Linear => {
                let wt = tape.transpose(weight)?;
                let z = tape.matmul(features, wt)?;
                match bias {
                    Some(b) => tape.add_bias(z, b),
                    None => Ok(z),
                }
            }
            HeadMode::Cosine { scale } => {
                let c = tape.cosine_similarity(features, weight)?;
                tape.scale(c, scale)
            }
        }
    }
}

/// Identifies one parameter tensor of a [`CompositeNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    BranchWeight { branch: usize, layer: usize },
    BranchBias { branch: usize, layer: usize },
    HeadWeight,
    HeadBias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub id: ParamId,
    pub offset: usize,
    pub len: usize,
}

/// Mapping between a flattened parameter vector and the net's tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub slots: Vec<ParamSlot>,
    pub trainable_only: bool,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        self.slots.iter().map(|s| s.len).sum()
    }
}

/// Multi-branch feature extractor with an incremental head.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeNet {
    branches: Vec<Backbone>,
    frozen: Vec<bool>,
    head: IncrementalHead,
}

/// Tape handles for every parameter of a net, produced by [`CompositeNet::bind`].
#[derive(Debug, Clone)]
pub struct BoundNet {
    layers: Vec<Vec<(Var, Var)>>,
    head_weight: Option<Var>,
    head_bias: Option<Var>,
    trainable: Vec<Var>,
    trainable_ids: Vec<ParamId>,
}

impl BoundNet {
    /// Vars of the trainable parameters in [`Trainable::params`] order.
    pub fn trainable(&self) -> &[Var] {
        &self.trainable
    }

    /// Var of a trainable parameter, `None` if it is frozen or absent.
    pub fn trainable_var(&self, id: ParamId) -> Option<Var> {
        self.trainable_ids
            .iter()
            .position(|&i| i == id)
            .map(|p| self.trainable[p])
    }
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub features: Var,
    pub branch_features: Vec<Var>,
    /// One activation per hidden layer, per branch.
    pub intermediates: Vec<Vec<Var>>,
    pub logits: Option<Var>,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardValues {
    pub features: Tensor,
    pub intermediates: Vec<Vec<Tensor>>,
    pub logits: Option<Tensor>,
}

impl CompositeNet {
    /// Single-branch network with an empty head.
    pub fn build(spec: BackboneSpec, mode: HeadMode, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(spec, rng::derive_seed(seed, &[0]))?;
        let head = IncrementalHead::new(backbone.feature_dim(), mode);
        Ok(CompositeNet {
            branches: vec![backbone],
            frozen: vec![false],
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.branches[0].spec.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.head.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn branches(&self) -> &[Backbone] {
        &self.branches
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, branch: usize, frozen: bool) {
        self.frozen[branch] = frozen;
    }

    pub fn head(&self) -> &IncrementalHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut IncrementalHead {
        &mut self.head
    }

    pub fn expand_head(&mut self, n_new: usize, seed: u64) -> Result<()> {
        self.head.expand(n_new, seed)
    }

    /// Freezes every existing branch, appends a trainable one and widens the
    /// head with zero weights on the new feature columns.
    pub fn expand_branch(&mut self, spec: BackboneSpec, seed: u64) -> Result<()> {
        if spec.input_dim != self.input_dim() {
            return Err(CilError::invalid(format!(
                "expand_branch: input_dim {} does not match existing {}",
                spec.input_dim,
                self.input_dim()
            )));
        }
        let backbone = Backbone::new(spec, seed)?;
        self.frozen.iter_mut().for_each(|f| *f = true);
        self.head.widen(backbone.feature_dim());
        self.branches.push(backbone);
        self.frozen.push(false);
        Ok(())
    }

    /// Records all parameters on `tape`; frozen branches become constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundNet> {
        let mut trainable = Vec::new();
        let mut trainable_ids = Vec::new();
        let mut layers = Vec::with_capacity(self.branches.len());
        for (b, branch) in self.branches.iter().enumerate() {
            let mut vars = Vec::with_capacity(branch.layers.len());
            for (l, layer) in branch.layers.iter().enumerate() {
                let (w, bias) = if self.frozen[b] {
                    (tape.constant(&layer.weight)?, tape.constant(&layer.bias)?)
                } else {
                    let w = tape.param(&layer.weight)?;
                    let bias = tape.param(&layer.bias)?;
                    trainable.push(w);
                    trainable.push(bias);
                    trainable_ids.push(ParamId::BranchWeight { branch: b, layer: l });
                    trainable_ids.push(ParamId::BranchBias { branch: b, layer: l });
                    (w, bias)
                };
                vars.push((w, bias));
            }
            layers.push(vars);
        }
        let head_weight = match &self.head.weight {
            Some(w) => {
                let v = tape.param(w)?;
                trainable.push(v);
                trainable_ids.push(ParamId::HeadWeight);
                Some(v)
            }
            None => None,
        };
        let head_bias = match &self.head.bias {
            Some(b) => {
                let v = tape.param(b)?;
                trainable.push(v);
                trainable_ids.push(ParamId::HeadBias);
                Some(v)
            }
            None => None,
        };
        Ok(BoundNet {
            layers,
            head_weight,
            head_bias,
            trainable,
            trainable_ids,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundNet, x: Var) -> Result<NetOutput> {
        let cols = tape.value(x).cols();
        if tape.shape(x).len() != 2 || cols != self.input_dim() {
            return Err(CilError::Shape {
                op: "forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let mut branch_features = Vec::with_capacity(self.branches.len());
        let mut intermediates = Vec::with_capacity(self.branches.len());
        for vars in &bound.layers {
            let mut h = x;
            let mut acts = Vec::with_capacity(vars.len());
            for &(w, b) in vars {
                let z = Linear::apply(tape, h, w, b)?;
                h = tape.relu(z)?;
                acts.push(h);
            }
            branch_features.push(h);
            intermediates.push(acts);
        }
        let features = if branch_features.len() == 1 {
            branch_features[0]
        } else {
            tape.concat_last_dim(&branch_features)?
        };
        let logits = match bound.head_weight {
            Some(w) => Some(self.head.apply(tape, features, w, bound.head_bias)?),
            None => None,
        };
        Ok(NetOutput {
            features,
            branch_features,
            intermediates,
            logits,
        })
    }

    /// Forward pass on a plain batch, returning values only.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<ForwardValues> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(batch)?;
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(ForwardValues {
            features: tape.value(out.features).clone(),
            intermediates: out
                .intermediates
                .iter()
                .map(|b| b.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
            logits: out.logits.map(|l| tape.value(l).clone()),
        })
    }

    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_batch(batch)?.features)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_batch(batch)?
            .logits
            .ok_or_else(|| CilError::invalid("network head has no classes"))
    }

    fn param_entries(&self, trainable_only: bool) -> Vec<(ParamId, &Tensor)> {
        let mut out = Vec::new();
        for (b, branch) in self.branches.iter().enumerate() {
            if trainable_only && self.frozen[b] {
                continue;
            }
            for (l, layer) in branch.layers.iter().enumerate() {
                out.push((ParamId::BranchWeight { branch: b, layer: l }, &layer.weight));
                out.push((ParamId::BranchBias { branch: b, layer: l }, &layer.bias));
            }
        }
        if let Some(w) = &self.head.weight {
            out.push((ParamId::HeadWeight, w));
        }
        if let Some(bias) = &self.head.bias {
            out.push((ParamId::HeadBias, bias));
        }
        out
    }

    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::BranchWeight { branch, layer } => self
                .branches
                .get_mut(branch)
                .and_then(|b| b.layers.get_mut(layer))
                .map(|l| &mut l.weight),
            ParamId::BranchBias { branch, layer } => self
                .branches
                .get_mut(branch)
                .and_then(|b| b.layers.get_mut(layer))
                .map(|l| &mut l.bias),
            ParamId::HeadWeight => self.head.weight.as_mut(),
            ParamId::HeadBias => self.head.bias.as_mut(),
        }
    }

    /// Flattens parameters in a stable order (branches, layers, weight then
    /// bias, then head weight and bias).
    pub fn parameter_vector(&self, trainable_only: bool) -> (Vec<f64>, ParamLayout) {
        let mut flat = Vec::new();
        let mut slots = Vec::new();
        for (id, t) in self.param_entries(trainable_only) {
            slots.push(ParamSlot {
                id,
                offset: flat.len(),
                len: t.numel(),
            });
            flat.extend_from_slice(t.data());
        }
        (
            flat,
            ParamLayout {
                slots,
                trainable_only,
            },
        )
    }

    /// Writes a flat vector produced under `layout` back into the tensors.
    pub fn write_parameter_vector(&mut self, layout: &ParamLayout, flat: &[f64]) -> Result<()> {
        if flat.len() != layout.total_len() {
            return Err(CilError::Shape {
                op: "write_parameter_vector",
                lhs: vec![layout.total_len()],
                rhs: vec![flat.len()],
            });
        }
        for slot in &layout.slots {
            let t = self
                .param_mut(slot.id)
                .ok_or_else(|| CilError::invalid(format!("no parameter {:?}", slot.id)))?;
            if t.numel() != slot.len {
                return Err(CilError::Shape {
                    op: "write_parameter_vector",
                    lhs: t.shape().to_vec(),
                    rhs: vec![slot.len],
                });
            }
            t.data_mut()
                .copy_from_slice(&flat[slot.offset..slot.offset + slot.len]);
        }
        Ok(())
    }

    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.param_entries(trainable_only)
            .iter()
            .map(|(_, t)| t.numel())
            .sum()
    }
}

impl Trainable for CompositeNet {
    fn params(&self) -> Vec<&Tensor> {
        self.param_entries(true).into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (b, branch) in self.branches.iter_mut().enumerate() {
            if self.frozen[b] {
                continue;
            }
            for layer in &mut branch.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        if let Some(w) = self.head.weight.as_mut() {
            out.push(w);
        }
        if let Some(b) = self.head.bias.as_mut() {
            out.push(b);
        }
        out
    }
}
