//! GateNet and the context-free baseline.
//!
//! GateNet has three blocks. The single-event block maps the event being gated
//! through (pointwise conv, batchnorm, ReLU) stages. The context block runs the
//! sample's context events through its own stages, one event at a time, and
//! averages the results over all context events. The head takes the
//! concatenation of both embeddings through a hidden dense + batchnorm + ReLU
//! layer and a final dense + batchnorm + softmax layer.
//!
//! All per-event maps are kernel-size-1 convolutions, so activations are kept as
//! `[rows, channels]` matrices and every conv is a row-wise affine map.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamSet};
use crate::kernels::{Mode, RunningStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateNetConfig {
    pub n_markers: usize,
    pub n_classes: usize,
    /// Context events per gated event.
    pub n_context: usize,
    pub single_block_filters: Vec<usize>,
    pub context_block_filters: Vec<usize>,
    pub head_hidden: usize,
    pub seed: u64,
}

impl GateNetConfig {
    pub fn new(n_markers: usize, n_classes: usize) -> Self {
        GateNetConfig {
            n_markers,
            n_classes,
            n_context: 1000,
            single_block_filters: vec![1024, 512, 256],
            context_block_filters: vec![64, 48],
            head_hidden: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_markers >= 1
            && self.n_classes >= 1
            && self.n_context >= 1
            && self.head_hidden >= 1
            && !self.single_block_filters.is_empty()
            && !self.context_block_filters.is_empty()
            && self.single_block_filters.iter().chain(&self.context_block_filters).all(|&f| f >= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid GateNet configuration {self:?}")))
        }
    }

    pub fn event_embedding_dim(&self) -> usize {
        *self.single_block_filters.last().expect("validated")
    }

    pub fn context_embedding_dim(&self) -> usize {
        *self.context_block_filters.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub n_markers: usize,
    pub n_classes: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(n_markers: usize, n_classes: usize) -> Self {
        BaselineConfig {
            n_markers,
            n_classes,
            hidden: vec![1024, 512, 256, 32],
            seed: 0,
        }
    }

    /// Per-event MLP with the same widths as a GateNet's event block and head.
    pub fn matching(gatenet: &GateNetConfig) -> Self {
        let mut hidden = gatenet.single_block_filters.clone();
        hidden.push(gatenet.head_hidden);
        BaselineConfig {
            n_markers: gatenet.n_markers,
            n_classes: gatenet.n_classes,
            hidden,
            seed: gatenet.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_markers == 0 || self.n_classes == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!("invalid baseline configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum ModelConfig {
    GateNet(GateNetConfig),
    Baseline(BaselineConfig),
}

impl ModelConfig {
    pub fn n_markers(&self) -> usize {
        match self {
            ModelConfig::GateNet(c) => c.n_markers,
            ModelConfig::Baseline(c) => c.n_markers,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelConfig::GateNet(c) => c.n_classes,
            ModelConfig::Baseline(c) => c.n_classes,
        }
    }

    /// Context events per gated event; `None` for context-free models.
    pub fn n_context(&self) -> Option<usize> {
        match self {
            ModelConfig::GateNet(c) => Some(c.n_context),
            ModelConfig::Baseline(_) => None,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelConfig::GateNet(c) => c.seed,
            ModelConfig::Baseline(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ModelConfig::GateNet(c) => c.seed = seed,
            ModelConfig::Baseline(c) => c.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::GateNet(c) => c.validate(),
            ModelConfig::Baseline(c) => c.validate(),
        }
    }
}

/// Affine map followed by batchnorm.
#[derive(Debug, Clone, Copy)]
struct Stage {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    shift: ParamId,
    stats: usize,
}

#[derive(Debug, Clone)]
enum Layout {
    GateNet {
        single: Vec<Stage>,
        context: Vec<Stage>,
        hidden: Stage,
        out: Stage,
    },
    Baseline {
        hidden: Vec<Stage>,
        out: Stage,
    },
}

/// Context events for a batch, stored as distinct rows plus an index.
///
/// Output row `b` pools rows `index[b·k .. (b+1)·k]`. `multiplicity[u]` is how many
/// times distinct row `u` occurs in `index`; batchnorm statistics weight each row by
/// it, which makes the result identical to running every drawn copy separately.
#[derive(Debug, Clone)]
pub struct ContextRows {
    pub rows: Tensor,
    pub index: Vec<u32>,
    pub k: usize,
    pub multiplicity: Vec<f64>,
}

impl ContextRows {
    /// One explicit context set per event: `contexts: [B, M, K]`.
    pub fn from_dense(contexts: &Tensor) -> Result<Self> {
        let &[b, m, k] = contexts.shape() else {
            return Err(Error::dim("context", format!("expected [B, M, K], got {:?}", contexts.shape())));
        };
        let d = contexts.data();
        let mut rows = Vec::with_capacity(b * k * m);
        for bi in 0..b {
            for ki in 0..k {
                for mi in 0..m {
                    rows.push(d[bi * m * k + mi * k + ki]);
                }
            }
        }
        Ok(ContextRows {
            rows: Tensor::matrix(b * k, m, rows)?,
            index: (0..(b * k) as u32).collect(),
            k,
            multiplicity: vec![1.0; b * k],
        })
    }

    /// Builds the deduplicated form from a row table and a draw list.
    pub fn from_draws(rows: Tensor, index: Vec<u32>, k: usize) -> Result<Self> {
        let mut multiplicity = vec![0.0; rows.rows()];
        for &i in &index {
            let slot = multiplicity
                .get_mut(i as usize)
                .ok_or_else(|| Error::dim("context", format!("draw {i} outside {} rows", rows.rows())))?;
            *slot += 1.0;
        }
        Ok(ContextRows {
            rows,
            index,
            k,
            multiplicity,
        })
    }
}

/// What the context path receives.
#[derive(Debug, Clone)]
pub enum ContextInput {
    Rows(ContextRows),
    /// Already pooled context embeddings `[B, E]` (eval-mode inference).
    Pooled(Tensor),
}

/// A model's configuration, trainable parameters, and batchnorm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamSet,
    pub running: Vec<RunningStats>,
    layout: Layout,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    running: &'a mut Vec<RunningStats>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn stage(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Stage {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w: Vec<f64> = (0..fan_out * fan_in).map(|_| dist.sample(self.rng)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| dist.sample(self.rng)).collect();
        let w = self.params.add(format!("{name}.weight"), Tensor::new(vec![fan_out, fan_in], w).expect("shape"));
        let b = self.params.add(format!("{name}.bias"), Tensor::vector(b));
        let gamma = self.params.add(format!("{name}.bn.gamma"), Tensor::filled(&[fan_out], 1.0));
        let shift = self.params.add(format!("{name}.bn.shift"), Tensor::zeros(&[fan_out]));
        self.running.push(RunningStats::new(fan_out));
        Stage {
            w,
            b,
            gamma,
            shift,
            stats: self.running.len() - 1,
        }
    }

    fn chain(&mut self, prefix: &str, input: usize, widths: &[usize]) -> Vec<Stage> {
        let mut fan_in = input;
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = self.stage(&format!("{prefix}.{i}"), fan_in, w);
                fan_in = w;
                s
            })
            .collect()
    }
}

impl Model {
    /// Fresh parameters: fan-in scaled uniform weights, unit batchnorm scale.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut running = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
        let mut b = Builder {
            params: &mut params,
            running: &mut running,
            rng: &mut rng,
        };
        let layout = match &config {
            ModelConfig::GateNet(c) => {
                let single = b.chain("single", c.n_markers, &c.single_block_filters);
                let context = b.chain("context", c.n_markers, &c.context_block_filters);
                let fused = c.event_embedding_dim() + c.context_embedding_dim();
                let hidden = b.stage("head.hidden", fused, c.head_hidden);
                let out = b.stage("head.out", c.head_hidden, c.n_classes);
                Layout::GateNet {
                    single,
                    context,
                    hidden,
                    out,
                }
            }
            ModelConfig::Baseline(c) => {
                let hidden = b.chain("mlp", c.n_markers, &c.hidden);
                let last = *c.hidden.last().unwrap_or(&c.n_markers);
                let out = b.stage("head.out", last, c.n_classes);
                Layout::Baseline { hidden, out }
            }
        };
        Ok(Model {
            config,
            params,
            running,
            layout,
        })
    }

    /// Rebuilds a model around stored tensors; names and shapes must match `config`.
    pub fn from_parts(config: ModelConfig, params: ParamSet, running: Vec<RunningStats>) -> Result<Self> {
        let mut model = Model::init(config)?;
        if model.params.len() != params.len() || model.running.len() != running.len() {
            return Err(Error::Validation("stored tensors do not match the model configuration".into()));
        }
        for (fresh, stored) in model.params.iter().zip(params.iter()) {
            if fresh.name != stored.name || fresh.value.shape() != stored.value.shape() {
                return Err(Error::Validation(format!(
                    "stored tensor `{}` {:?} where `{}` {:?} was expected",
                    stored.name,
                    stored.value.shape(),
                    fresh.name,
                    fresh.value.shape()
                )));
            }
        }
        for (fresh, stored) in model.running.iter().zip(&running) {
            if fresh.mean.len() != stored.mean.len() || fresh.var.len() != stored.var.len() {
                return Err(Error::Validation("running statistics shape mismatch".into()));
            }
        }
        model.params = params;
        model.running = running;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.params.numel()
    }

    fn stage(&self, g: &mut Graph, s: Stage, x: NodeId, mode: Mode, weights: Option<Vec<f64>>, relu: bool) -> Result<NodeId> {
        let h = g.linear(&self.params, x, s.w, s.b)?;
        let h = g.batchnorm(&self.params, h, s.gamma, s.shift, (s.stats, &self.running[s.stats]), mode, weights)?;
        Ok(if relu { g.relu(h) } else { h })
    }

    /// Records the forward pass on `g` and returns the probability node `[B, C]`.
    ///
    /// In [`Mode::Train`] the running-statistics updates are left on the graph;
    /// apply them with [`Model::commit_stats`].
    pub fn forward_graph(&self, g: &mut Graph, events: Tensor, context: Option<ContextInput>, mode: Mode) -> Result<NodeId> {
        let (b, m) = events.dims2("forward")?;
        if m != self.config.n_markers() {
            return Err(Error::dim(
                "forward",
                format!("events have {m} markers, model expects {}", self.config.n_markers()),
            ));
        }
        let x = g.input(events);
        let logits = match &self.layout {
            Layout::GateNet {
                single,
                context: ctx_stages,
                hidden,
                out,
            } => {
                let ModelConfig::GateNet(cfg) = &self.config else { unreachable!() };
                let mut h = x;
                for &s in single {
                    h = self.stage(g, s, h, mode, None, true)?;
                }
                let pooled = match context {
                    None => return Err(Error::EmptyContext),
                    Some(ContextInput::Pooled(t)) => {
                        if t.shape() != [b, cfg.context_embedding_dim()] {
                            return Err(Error::dim("forward", format!("pooled context {:?}", t.shape())));
                        }
                        g.input(t)
                    }
                    Some(ContextInput::Rows(cr)) => {
                        if cr.k == 0 {
                            return Err(Error::EmptyContext);
                        }
                        if cr.k != cfg.n_context {
                            return Err(Error::dim(
                                "forward",
                                format!("{} context events per event, model expects {}", cr.k, cfg.n_context),
                            ));
                        }
                        if cr.index.len() != b * cr.k {
                            return Err(Error::dim("forward", format!("{} context draws for {b} events", cr.index.len())));
                        }
                        if cr.rows.cols() != m {
                            return Err(Error::dim("forward", "context events have a different marker count"));
                        }
                        let mut c = g.input(cr.rows);
                        for &s in ctx_stages {
                            c = self.stage(g, s, c, mode, Some(cr.multiplicity.clone()), true)?;
                        }
                        if mode == Mode::Eval {
                            g.gather_mean_canonical(c, cr.index, cr.k)?
                        } else {
                            g.gather_mean(c, cr.index, cr.k)?
                        }
                    }
                };
                let fused = g.concat(h, pooled)?;
                let z = self.stage(g, *hidden, fused, mode, None, true)?;
                self.stage(g, *out, z, mode, None, false)?
            }
            Layout::Baseline { hidden, out } => {
                let mut h = x;
                for &s in hidden {
                    h = self.stage(g, s, h, mode, None, true)?;
                }
                self.stage(g, *out, h, mode, None, false)?
            }
        };
        g.softmax(logits)
    }

    pub fn commit_stats(&mut self, g: &mut Graph) {
        for (slot, stats) in g.take_stat_updates() {
            self.running[slot] = stats;
        }
    }

    /// Context-block output for each row of `rows: [U, M]` (before pooling), eval mode.
    pub fn context_embeddings(&self, rows: Tensor) -> Result<Tensor> {
        let Layout::GateNet { context, .. } = &self.layout else {
            return Err(Error::State("context-free model has no context block".into()));
        };
        let mut g = Graph::new();
        let mut c = g.input(rows);
        for &s in context {
            c = self.stage(&mut g, s, c, Mode::Eval, None, true)?;
        }
        Ok(g.value(c).clone())
    }

    /// GateNet forward on events `[B, M]` with explicit contexts `[B, M, K]`.
    ///
    /// Train mode updates running statistics.
    pub fn forward(&mut self, events: &Tensor, contexts: &Tensor, mode: Mode) -> Result<Tensor> {
        let ctx = ContextRows::from_dense(contexts)?;
        let mut g = Graph::new();
        let probs = self.forward_graph(&mut g, events.clone(), Some(ContextInput::Rows(ctx)), mode)?;
        self.commit_stats(&mut g);
        Ok(g.value(probs).clone())
    }

    /// Context-free forward on events `[B, M]`.
    pub fn forward_baseline(&mut self, events: &Tensor, mode: Mode) -> Result<Tensor> {
        if !matches!(self.layout, Layout::Baseline { .. }) {
            return Err(Error::State("forward_baseline called on a GateNet".into()));
        }
        let mut g = Graph::new();
        let probs = self.forward_graph(&mut g, events.clone(), None, mode)?;
        self.commit_stats(&mut g);
        Ok(g.value(probs).clone())
    }
}
