//! Reverse-mode differentiation over a recorded forward pass.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append nodes in
//! evaluation order, so the backward sweep simply walks the tape in reverse.
//! Trainable tensors live in a [`ParamSet`] outside the graph; ops refer to them
//! by [`ParamId`] and their gradients are accumulated into the set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BnCache, Mode, RunningStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

enum Op {
    Input,
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        shift: ParamId,
        cache: BnCache,
        weights: Option<Vec<f64>>,
    },
    Relu {
        x: NodeId,
    },
    GatherMean {
        x: NodeId,
        index: Vec<u32>,
        k: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    FocalLoss {
        probs: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        gamma: f64,
    },
    Sum {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        coef: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_grads: Vec<Option<Tensor>>,
    saturated: usize,
    stat_updates: Vec<(usize, RunningStats)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Probabilities clamped by focal-loss nodes recorded on this tape.
    pub fn saturated(&self) -> usize {
        self.saturated
    }

    /// Running-statistics updates produced by train-mode batchnorm nodes, keyed by
    /// the slot passed to [`Graph::batchnorm`]. The owner applies them.
    pub fn take_stat_updates(&mut self) -> Vec<(usize, RunningStats)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn linear(&mut self, params: &ParamSet, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let out = kernels::linear_rows(self.value(x), params.value(w), params.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn batchnorm(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        gamma: ParamId,
        shift: ParamId,
        running: (usize, &RunningStats),
        mode: Mode,
        weights: Option<Vec<f64>>,
    ) -> Result<NodeId> {
        let (slot, running) = running;
        let mut updated = running.clone();
        let (out, cache) = kernels::batchnorm(
            self.value(x),
            params.value(gamma),
            params.value(shift),
            &mut updated,
            mode,
            weights.as_deref(),
        )?;
        if mode == Mode::Train {
            self.stat_updates.push((slot, updated));
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                shift,
                cache,
                weights,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn gather_mean(&mut self, x: NodeId, index: Vec<u32>, k: usize) -> Result<NodeId> {
        let out = kernels::gather_mean(self.value(x), &index, k)?;
        Ok(self.push(out, Op::GatherMean { x, index, k }))
    }

    /// [`Graph::gather_mean`] with the permutation-exact forward of
    /// [`kernels::gather_mean_canonical`].
    pub fn gather_mean_canonical(&mut self, x: NodeId, index: Vec<u32>, k: usize) -> Result<NodeId> {
        let out = kernels::gather_mean_canonical(self.value(x), &index, k)?;
        Ok(self.push(out, Op::GatherMean { x, index, k }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    pub fn focal_loss(&mut self, probs: NodeId, targets: Vec<usize>, weights: Vec<f64>, gamma: f64) -> Result<NodeId> {
        let (loss, saturated) = kernels::focal_loss(self.value(probs), &targets, &weights, gamma)?;
        self.saturated += saturated;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::FocalLoss {
                probs,
                targets,
                weights,
                gamma,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// `Σ coef ⊙ x`; a scalar probe used to check gradients of non-scalar outputs.
    pub fn weighted_sum(&mut self, x: NodeId, coef: Tensor) -> Result<NodeId> {
        if coef.shape() != self.value(x).shape() {
            return Err(Error::dim("weighted_sum", "coefficient shape"));
        }
        let s = self.value(x).data().iter().zip(coef.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, coef }))
    }

    /// Gradient of the last backward pass with respect to an input node.
    pub fn input_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.input_grads.get(id.0).and_then(Option::as_ref)
    }

    /// Propagates d(loss)/d(·) back through the tape.
    ///
    /// Parameter gradients are added to `params`; calling this twice without
    /// [`ParamSet::zero_grad`] in between accumulates.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!("node {} is not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    let lg = kernels::linear_rows_backward(self.value(*x), params.value(*w), &g)?;
                    params.get_mut(*w).grad.add_assign(&lg.dw);
                    params.get_mut(*b).grad.add_assign(&lg.db);
                    accumulate(&mut grads, *x, lg.dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    shift,
                    cache,
                    weights,
                } => {
                    let bg = kernels::batchnorm_backward(cache, params.value(*gamma), &g, weights.as_deref())?;
                    params.get_mut(*gamma).grad.add_assign(&bg.dgamma);
                    params.get_mut(*shift).grad.add_assign(&bg.dshift);
                    accumulate(&mut grads, *x, bg.dx);
                }
                Op::Relu { x } => {
                    let dx = kernels::relu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherMean { x, index, k } => {
                    let rows = self.value(*x).rows();
                    let dx = kernels::gather_mean_backward(rows, index, *k, &g)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let n = g.rows();
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(n, ca, da)?);
                    accumulate(&mut grads, *b, Tensor::matrix(n, cb, db)?);
                }
                Op::Softmax { x } => {
                    let dx = kernels::softmax_backward(&node.value, &g)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::FocalLoss {
                    probs,
                    targets,
                    weights,
                    gamma,
                } => {
                    let mut dp = kernels::focal_loss_backward(self.value(*probs), targets, weights, *gamma)?;
                    let s = g.data()[0];
                    dp.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *probs, dp);
                }
                Op::Sum { x } => {
                    let s = g.data()[0];
                    let dx = Tensor::filled(self.value(*x).shape(), s);
                    accumulate(&mut grads, *x, dx);
                }
                Op::WeightedSum { x, coef } => {
                    let s = g.data()[0];
                    let mut dx = coef.clone();
                    dx.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        self.input_grads = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
