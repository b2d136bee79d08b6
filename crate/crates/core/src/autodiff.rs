//! Eager reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Values live on the
//! tape and are addressed through [`Var`] handles; [`Tape::backward`] walks
//! the recorded nodes once in reverse order and accumulates gradients into
//! every node that depends on a parameter leaf. A tape is meant to be built
//! for one forward pass and dropped after its backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CilError, Result};
use crate::linalg;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Lower clamp on norms used by row normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// The primitive forward operations that can be dispatched by kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    AddBias,
    Relu,
    ConcatLastDim,
    Scale(f64),
    Mean,
    L2NormSq,
    CosineSimilarity,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Mean {
        x: usize,
    },
    Sum {
        x: usize,
    },
    L2NormSq {
        x: usize,
    },
    RowNormalize {
        x: usize,
        norms: Vec<f64>,
    },
    SliceCols {
        x: usize,
        start: usize,
        end: usize,
    },
    SoftmaxCe {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Kd {
        new: usize,
        old_cols: usize,
        temperature: f64,
        p_old: Vec<f64>,
        q_new: Vec<f64>,
    },
    WeightedSqDist {
        x: usize,
        anchor: Vec<f64>,
        weights: Vec<f64>,
    },
    ScalarAffine {
        x: usize,
        alpha: usize,
        beta: usize,
        start: usize,
    },
    MatMulConst {
        x: usize,
        rhs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CilError::NonFinite { op })
    }
}

fn softmax_rows(z: &[f64], rows: usize, cols: usize, temperature: f64) -> (Vec<f64>, Vec<f64>) {
    // Returns (probabilities, log-probabilities), both row-major.
    let mut probs = vec![0.0; rows * cols];
    let mut logp = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let sum: f64 = row.iter().map(|&v| (v / temperature - max).exp()).sum();
        let lse = max + sum.ln();
        for c in 0..cols {
            let lp = row[c] / temperature - lse;
            logp[r * cols + c] = lp;
            probs[r * cols + c] = lp.exp();
        }
    }
    (probs, logp)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(CilError::Tape(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    fn leaf(&mut self, value: Tensor, is_param: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        let index = self.nodes.len();
        let mut value = value;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: is_param,
            is_param,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    /// Records a differentiable leaf. Its gradient is populated by `backward`.
    pub fn param(&mut self, value: &Tensor) -> Result<Var> {
        self.leaf(value.clone(), true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: &Tensor) -> Result<Var> {
        self.leaf(value.clone(), false)
    }

    pub fn constant_owned(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the right length when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    fn dims2(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        let s = self.nodes[i].value.shape();
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(CilError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Dispatches one of the primitive ops by kind.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(CilError::invalid(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::AddBias => {
                arity(2)?;
                self.add_bias(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::ConcatLastDim => self.concat_last_dim(inputs),
            OpKind::Scale(f) => {
                arity(1)?;
                self.scale(inputs[0], f)
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::L2NormSq => {
                arity(1)?;
                self.l2_norm_sq(inputs[0])
            }
            OpKind::CosineSimilarity => {
                arity(2)?;
                self.cosine_similarity(inputs[0], inputs[1])
            }
        }
    }

    /// (n,k) x (k,m) -> (n,m)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CilError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = linalg::matmul(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            sa[0],
            sa[1],
            sb[1],
        );
        let value = Tensor::from_parts(vec![sa[0], sb[1]], out);
        self.push("matmul", value, Op::MatMul { a: ai, b: bi }, &[ai, bi])
    }

    /// Multiplies by a constant right-hand matrix that is not itself on the tape.
    pub fn matmul_const(&mut self, x: Var, rhs: &Tensor) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, k) = self.dims2("matmul", xi)?;
        let sr = rhs.shape();
        if sr.len() != 2 || sr[0] != k {
            return Err(CilError::Shape {
                op: "matmul",
                lhs: self.nodes[xi].value.shape().to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let m = sr[1];
        let out = linalg::matmul(self.nodes[xi].value.data(), rhs.data(), n, k, m);
        let value = Tensor::from_parts(vec![n, m], out);
        self.push(
            "matmul",
            value,
            Op::MatMulConst {
                x: xi,
                rhs: rhs.clone(),
            },
            &[xi],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (r, c) = self.dims2("transpose", xi)?;
        let out = linalg::transpose(self.nodes[xi].value.data(), r, c);
        let value = Tensor::from_parts(vec![c, r], out);
        self.push("transpose", value, Op::Transpose { x: xi }, &[xi])
    }

    /// Adds a length-m bias to every row of an (n,m) tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let sx = self.nodes[xi].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        let (n, m) = self.dims2("add_bias", xi)?;
        if sb.len() != 1 || sb[0] != m {
            return Err(CilError::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.nodes[bi].value.data();
        let mut out = self.nodes[xi].value.data().to_vec();
        for r in 0..n {
            for c in 0..m {
                out[r * m + c] += b[c];
            }
        }
        let value = Tensor::from_parts(sx, out);
        self.push("add_bias", value, Op::AddBias { x: xi, bias: bi }, &[xi, bi])
    }

    fn same_shape(&self, op: &'static str, ai: usize, bi: usize) -> Result<()> {
        let sa = self.nodes[ai].value.shape();
        let sb = self.nodes[bi].value.shape();
        if sa != sb {
            return Err(CilError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let out: Vec<f64> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.nodes[ai].value.shape().to_vec(), out);
        self.push("add", value, Op::Add { a: ai, b: bi }, &[ai, bi])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", ai, bi)?;
        let out: Vec<f64> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_parts(self.nodes[ai].value.shape().to_vec(), out);
        self.push("sub", value, Op::Sub { a: ai, b: bi }, &[ai, bi])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out: Vec<f64> = self.nodes[xi]
            .value
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::from_parts(self.nodes[xi].value.shape().to_vec(), out);
        self.push("relu", value, Op::Relu { x: xi }, &[xi])
    }

    /// Concatenates along the last dimension; all other dimensions must agree.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CilError::invalid("concat_last_dim: no inputs"));
        }
        let idxs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        let lead = &first[..first.len() - 1];
        for &i in &idxs[1..] {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(CilError::Shape {
                    op: "concat_last_dim",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = idxs
            .iter()
            .map(|&i| *self.nodes[i].value.shape().last().unwrap())
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&i, &w) in idxs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let value = Tensor::from_parts(shape, out);
        self.push("concat_last_dim", value, Op::Concat { parts: idxs.clone() }, &idxs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        if !factor.is_finite() {
            return Err(CilError::NonFinite { op: "scale" });
        }
        let out: Vec<f64> = self.nodes[xi].value.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(self.nodes[xi].value.shape().to_vec(), out);
        self.push("scale", value, Op::Scale { x: xi, factor }, &[xi])
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let d = self.nodes[xi].value.data();
        let v = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Tensor::scalar(v), Op::Mean { x: xi }, &[xi])
    }

    /// Sum over all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(v), Op::Sum { x: xi }, &[xi])
    }

    /// Sum of squares over all elements.
    pub fn l2_norm_sq(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.data().iter().map(|v| v * v).sum::<f64>();
        self.push("l2_norm_sq", Tensor::scalar(v), Op::L2NormSq { x: xi }, &[xi])
    }

    /// Divides every row by its L2 norm (clamped below at [`NORM_EPS`]).
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (r, c) = self.dims2("row_normalize", xi)?;
        let d = self.nodes[xi].value.data();
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let n = linalg::norm(row);
            norms.push(n);
            let denom = n.max(NORM_EPS);
            for j in 0..c {
                out[i * c + j] = row[j] / denom;
            }
        }
        let value = Tensor::from_parts(self.nodes[xi].value.shape().to_vec(), out);
        self.push("row_normalize", value, Op::RowNormalize { x: xi, norms }, &[xi])
    }

    /// Pairwise cosine similarity between rows of `a` (n,d) and rows of `b` (c,d).
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (_, da) = self.dims2("cosine_similarity", ai)?;
        let (_, db) = self.dims2("cosine_similarity", bi)?;
        if da != db {
            return Err(CilError::Shape {
                op: "cosine_similarity",
                lhs: self.nodes[ai].value.shape().to_vec(),
                rhs: self.nodes[bi].value.shape().to_vec(),
            });
        }
        let an = self.row_normalize(a)?;
        let bn = self.row_normalize(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (r, c) = self.dims2("slice_cols", xi)?;
        if start >= end || end > c {
            return Err(CilError::Shape {
                op: "slice_cols",
                lhs: self.nodes[xi].value.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let d = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        let value = Tensor::from_parts(vec![r, w], out);
        self.push("slice_cols", value, Op::SliceCols { x: xi, start, end }, &[xi])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (n, c) = self.dims2("softmax_cross_entropy", li)?;
        if targets.is_empty() {
            return Err(CilError::invalid("softmax_cross_entropy: empty batch"));
        }
        if targets.len() != n {
            return Err(CilError::Shape {
                op: "softmax_cross_entropy",
                lhs: self.nodes[li].value.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(CilError::invalid(format!(
                "softmax_cross_entropy: target {t} out of range for {c} classes"
            )));
        }
        let (probs, logp) = softmax_rows(self.nodes[li].value.data(), n, c, 1.0);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| logp[r * c + t])
            .sum::<f64>()
            / n as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            &[li],
        )
    }

    /// Temperature-scaled distillation: mean over the batch of
    /// `KL(softmax(old/T) || softmax(new[:, :C_old]/T)) * T^2`.
    ///
    /// `old_logits` is row-major (batch, `old_classes`) and is a constant.
    pub fn kd_loss(
        &mut self,
        old_logits: &[f64],
        old_classes: usize,
        new_logits: Var,
        temperature: f64,
    ) -> Result<Var> {
        if old_classes == 0 {
            return Err(CilError::invalid("kd_loss: no old classes to distill"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CilError::invalid(format!(
                "kd_loss: temperature must be positive, got {temperature}"
            )));
        }
        let ni = self.idx(new_logits)?;
        let (n, c_new) = self.dims2("kd_loss", ni)?;
        if c_new < old_classes || old_logits.len() != n * old_classes {
            return Err(CilError::Shape {
                op: "kd_loss",
                lhs: vec![old_logits.len() / old_classes.max(1), old_classes],
                rhs: self.nodes[ni].value.shape().to_vec(),
            });
        }
        check_finite("kd_loss", old_logits)?;
        let d = self.nodes[ni].value.data();
        let mut head = Vec::with_capacity(n * old_classes);
        for r in 0..n {
            head.extend_from_slice(&d[r * c_new..r * c_new + old_classes]);
        }
        let (p_old, logp_old) = softmax_rows(old_logits, n, old_classes, temperature);
        let (q_new, logq_new) = softmax_rows(&head, n, old_classes, temperature);
        let kl: f64 = p_old
            .iter()
            .zip(logp_old.iter().zip(&logq_new))
            .map(|(p, (lp, lq))| p * (lp - lq))
            .sum();
        let loss = kl * temperature * temperature / n as f64;
        self.push(
            "kd_loss",
            Tensor::scalar(loss),
            Op::Kd {
                new: ni,
                old_cols: old_classes,
                temperature,
                p_old,
                q_new,
            },
            &[ni],
        )
    }

    /// `sum_i weights[i] * (x[i] - anchor[i])^2` over the first `anchor.len()`
    /// entries of `x`. Later entries of `x` are unconstrained.
    pub fn weighted_sq_distance(&mut self, x: Var, anchor: &[f64], weights: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.nodes[xi].value.numel();
        if anchor.len() != weights.len() || anchor.len() > n {
            return Err(CilError::Shape {
                op: "weighted_sq_distance",
                lhs: self.nodes[xi].value.shape().to_vec(),
                rhs: vec![anchor.len(), weights.len()],
            });
        }
        check_finite("weighted_sq_distance", anchor)?;
        check_finite("weighted_sq_distance", weights)?;
        let d = self.nodes[xi].value.data();
        let v: f64 = (0..anchor.len())
            .map(|i| {
                let delta = d[i] - anchor[i];
                weights[i] * delta * delta
            })
            .sum();
        self.push(
            "weighted_sq_distance",
            Tensor::scalar(v),
            Op::WeightedSqDist {
                x: xi,
                anchor: anchor.to_vec(),
                weights: weights.to_vec(),
            },
            &[xi],
        )
    }

    /// Columns `start..` become `alpha * z + beta`; earlier columns pass through.
    /// `alpha` and `beta` are single-element variables.
    pub fn scalar_affine_tail(&mut self, x: Var, alpha: Var, beta: Var, start: usize) -> Result<Var> {
        let (xi, ai, bi) = (self.idx(x)?, self.idx(alpha)?, self.idx(beta)?);
        let (r, c) = self.dims2("scalar_affine", xi)?;
        if self.nodes[ai].value.numel() != 1 || self.nodes[bi].value.numel() != 1 || start > c {
            return Err(CilError::Shape {
                op: "scalar_affine",
                lhs: self.nodes[xi].value.shape().to_vec(),
                rhs: vec![start],
            });
        }
        let a = self.nodes[ai].value.item();
        let b = self.nodes[bi].value.item();
        let mut out = self.nodes[xi].value.data().to_vec();
        for i in 0..r {
            for j in start..c {
                out[i * c + j] = a * out[i * c + j] + b;
            }
        }
        let value = Tensor::from_parts(vec![r, c], out);
        self.push(
            "scalar_affine",
            value,
            Op::ScalarAffine {
                x: xi,
                alpha: ai,
                beta: bi,
                start,
            },
            &[xi, ai, bi],
        )
    }

    /// Reverse pass from a scalar root. Gradients from earlier backward calls
    /// are discarded; each parameter leaf ends with a (possibly zero) gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ri = self.idx(root)?;
        if !self.nodes[ri].value.is_scalar() {
            return Err(CilError::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[ri].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[ri] = Some(vec![1.0]);

        for i in (0..=ri).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(slot);
        };
        let out_shape = nodes[i].value.shape();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let sa = nodes[a].value.shape();
                let sb = nodes[b].value.shape();
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if wants(a) {
                    let ga = linalg::matmul_a_bt(g, nodes[b].value.data(), n, m, k);
                    acc(a, &mut |s| linalg::add_assign(s, &ga));
                }
                if wants(b) {
                    let gb = linalg::matmul_at_b(nodes[a].value.data(), g, n, k, m);
                    acc(b, &mut |s| linalg::add_assign(s, &gb));
                }
            }
            Op::MatMulConst { x, rhs } => {
                let sx = nodes[*x].value.shape();
                let (n, k, m) = (sx[0], sx[1], rhs.shape()[1]);
                let gx = linalg::matmul_a_bt(g, rhs.data(), n, m, k);
                acc(*x, &mut |s| linalg::add_assign(s, &gx));
            }
            &Op::Transpose { x } => {
                // output is (c, r); gradient transposes back to (r, c)
                let (c, r) = (out_shape[0], out_shape[1]);
                let gx = linalg::transpose(g, c, r);
                acc(x, &mut |s| linalg::add_assign(s, &gx));
            }
            &Op::AddBias { x, bias } => {
                acc(x, &mut |s| linalg::add_assign(s, g));
                let m = nodes[bias].value.numel();
                acc(bias, &mut |s| {
                    for (idx, v) in g.iter().enumerate() {
                        s[idx % m] += v;
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |s| linalg::add_assign(s, g));
                acc(b, &mut |s| linalg::add_assign(s, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |s| linalg::add_assign(s, g));
                acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            &Op::Relu { x } => {
                let xd = nodes[x].value.data();
                acc(x, &mut |s| {
                    for ((d, v), &xv) in s.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *d += v;
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let total = *out_shape.last().unwrap();
                let outer = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *nodes[p].value.shape().last().unwrap();
                    acc(p, &mut |s| {
                        for r in 0..outer {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::Scale { x, factor } => {
                acc(x, &mut |s| s.iter_mut().zip(g).for_each(|(d, v)| *d += factor * v));
            }
            &Op::Mean { x } => {
                let n = nodes[x].value.numel() as f64;
                let gv = g[0] / n;
                acc(x, &mut |s| s.iter_mut().for_each(|d| *d += gv));
            }
            &Op::Sum { x } => {
                let gv = g[0];
                acc(x, &mut |s| s.iter_mut().for_each(|d| *d += gv));
            }
            &Op::L2NormSq { x } => {
                let xd = nodes[x].value.data();
                let gv = g[0];
                acc(x, &mut |s| {
                    s.iter_mut().zip(xd).for_each(|(d, v)| *d += 2.0 * v * gv)
                });
            }
            Op::RowNormalize { x, norms } => {
                let y = nodes[i].value.data();
                let c = y.len() / norms.len();
                acc(*x, &mut |s| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        if n > NORM_EPS {
                            let dot = linalg::dot(yr, gr);
                            for j in 0..c {
                                s[r * c + j] += (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..c {
                                s[r * c + j] += gr[j] / NORM_EPS;
                            }
                        }
                    }
                });
            }
            &Op::SliceCols { x, start, end } => {
                let c = nodes[x].value.cols();
                let w = end - start;
                acc(x, &mut |s| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            s[r * c + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Kd {
                new,
                old_cols,
                temperature,
                p_old,
                q_new,
            } => {
                let c_new = nodes[*new].value.cols();
                let n = p_old.len() / old_cols;
                let scale = g[0] * temperature / n as f64;
                acc(*new, &mut |s| {
                    for r in 0..n {
                        for j in 0..*old_cols {
                            let k = r * old_cols + j;
                            s[r * c_new + j] += scale * (q_new[k] - p_old[k]);
                        }
                    }
                });
            }
            Op::WeightedSqDist { x, anchor, weights } => {
                let xd = nodes[*x].value.data();
                let gv = g[0];
                acc(*x, &mut |s| {
                    for j in 0..anchor.len() {
                        s[j] += gv * 2.0 * weights[j] * (xd[j] - anchor[j]);
                    }
                });
            }
            &Op::ScalarAffine { x, alpha, beta, start } => {
                let c = out_shape[1];
                let a = nodes[alpha].value.item();
                let xd = nodes[x].value.data();
                acc(x, &mut |s| {
                    for (k, (d, v)) in s.iter_mut().zip(g).enumerate() {
                        *d += if k % c >= start { a * v } else { *v };
                    }
                });
                let (mut ga, mut gb) = (0.0, 0.0);
                for (k, v) in g.iter().enumerate() {
                    if k % c >= start {
                        ga += v * xd[k];
                        gb += v;
                    }
                }
                acc(alpha, &mut |s| s[0] += ga);
                acc(beta, &mut |s| s[0] += gb);
            }
        }
    }
}
