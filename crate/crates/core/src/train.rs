//! Training loop and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cyto::{EventTable, FittedTransform, LabeledSample, MarkerPanel, TransformSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imbalance::{context_sampler, effective_number_weights, ClassWeights, EventSampler, SamplerConfig};
use crate::kernels::{self, Mode};
use crate::model::{ContextInput, ContextRows, Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState, OneCycleSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub max_epochs: usize,
    pub min_iters_small_data: usize,
    pub max_lr: f64,
    /// Focal-loss focusing parameter; 0 is cross-entropy.
    pub gamma: f64,
    pub beta_loss: f64,
    pub beta_sampling: f64,
    /// Effective-number class weights in the loss; otherwise every class weighs 1.
    pub weighted_loss: bool,
    /// Effective-number event sampling; otherwise events are drawn uniformly.
    pub balanced_sampling: bool,
    pub transform: TransformSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            max_iters: 5000,
            max_epochs: 10,
            min_iters_small_data: 50,
            max_lr: 0.002,
            gamma: 5.0,
            beta_loss: 0.99,
            beta_sampling: 0.999,
            weighted_loss: true,
            balanced_sampling: true,
            transform: TransformSpec::Zscore,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Uniform sampling and unweighted cross-entropy.
    pub fn without_imbalance_handling(mut self) -> Self {
        self.gamma = 0.0;
        self.weighted_loss = false;
        self.balanced_sampling = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_iters", self.max_iters),
            ("max_epochs", self.max_epochs),
            ("min_iters_small_data", self.min_iters_small_data),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        for (name, b) in [("beta_loss", self.beta_loss), ("beta_sampling", self.beta_sampling)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// `min(batch_size, ⌊n·max_epochs / min_iters_small_data⌋)`, at least 1.
pub fn effective_batch_size(n_train_events: usize, cfg: &TrainConfig) -> usize {
    let adaptive = n_train_events.saturating_mul(cfg.max_epochs) / cfg.min_iters_small_data.max(1);
    cfg.batch_size.min(adaptive).max(1)
}

/// `min(max_iters, ⌊max_epochs·n / batch⌋)`, at least 1.
pub fn planned_iterations(n_train_events: usize, batch: usize, cfg: &TrainConfig) -> usize {
    let by_epochs = cfg.max_epochs.saturating_mul(n_train_events) / batch.max(1);
    cfg.max_iters.min(by_epochs).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub batch_size: usize,
    pub total_iters: usize,
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    /// Rows per iteration whose target probability hit the 1e-12 floor.
    pub saturated: Vec<usize>,
}

/// Everything needed to label a new sample.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub panel: MarkerPanel,
    pub class_names: Vec<String>,
    pub transform: FittedTransform,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training events of all samples after the fitted transform, in one table.
struct Pool {
    m: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
    owner: Vec<u32>,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

impl Pool {
    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }
}

fn check_compatible(samples: &[&LabeledSample]) -> Result<(MarkerPanel, Vec<String>)> {
    let Some(first) = samples.first() else {
        return Err(Error::Validation("no training samples".into()));
    };
    let panel = first.events.panel().clone();
    let classes = first.class_names().to_vec();
    for s in samples {
        if s.events.panel() != &panel {
            return Err(Error::Validation(format!("sample `{}` has a different marker panel", s.sample_id())));
        }
        if s.class_names() != classes.as_slice() {
            return Err(Error::Validation(format!("sample `{}` has different class names", s.sample_id())));
        }
    }
    Ok((panel, classes))
}

/// Trains a fresh model on `train_samples`.
///
/// The model is initialized from `cfg.seed` (the seed in `model_config` is
/// replaced), so one seed fixes the whole run.
pub fn train(
    model_config: &ModelConfig,
    train_samples: &[&LabeledSample],
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate()?;
    let (panel, class_names) = check_compatible(train_samples)?;
    if model_config.n_markers() != panel.n_markers() {
        return Err(Error::Config(format!(
            "model expects {} markers, data has {}",
            model_config.n_markers(),
            panel.n_markers()
        )));
    }
    if model_config.n_classes() != class_names.len() {
        return Err(Error::Config(format!(
            "model expects {} classes, data has {}",
            model_config.n_classes(),
            class_names.len()
        )));
    }
    let transform = FittedTransform::fit(&cfg.transform, train_samples.iter().map(|s| &s.events))?;

    let m = panel.n_markers();
    let mut pool = Pool {
        m,
        values: Vec::new(),
        labels: Vec::new(),
        owner: Vec::new(),
        offsets: Vec::new(),
        sizes: Vec::new(),
    };
    for s in train_samples.iter().filter(|s| s.n_events() > 0) {
        let t = transform.apply(&s.events)?;
        let si = pool.offsets.len();
        pool.offsets.push(pool.labels.len());
        pool.sizes.push(s.n_events());
        pool.values.extend_from_slice(t.intensities());
        pool.labels.extend_from_slice(s.labels());
        pool.owner.extend(std::iter::repeat_n(si as u32, s.n_events()));
    }
    let n = pool.labels.len();
    if n == 0 {
        return Err(Error::Validation("training samples contain no events".into()));
    }
    let n_classes = class_names.len();
    let mut counts = vec![0usize; n_classes];
    for &l in &pool.labels {
        counts[l] += 1;
    }

    let class_weights = if cfg.weighted_loss {
        effective_number_weights(&counts, cfg.beta_loss)?
    } else {
        ClassWeights::uniform(n_classes)
    };
    let mut sampler = if cfg.balanced_sampling {
        EventSampler::new(
            &pool.labels,
            n_classes,
            &SamplerConfig {
                beta_sampling: cfg.beta_sampling,
                seed: derive_seed(cfg.seed, 1),
            },
        )?
    } else {
        EventSampler::uniform(n, derive_seed(cfg.seed, 1))?
    };
    let mut ctx_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));

    let mut mc = model_config.clone();
    mc.set_seed(derive_seed(cfg.seed, 3));
    let mut model = Model::init(mc)?;
    let mut adam = AdamState::new(&model.params, AdamConfig::default());

    let batch = effective_batch_size(n, cfg);
    let total = planned_iterations(n, batch, cfg);
    let schedule = OneCycleSchedule::new(cfg.max_lr, total);
    let k = model.config().n_context();

    let mut history = TrainHistory {
        batch_size: batch,
        total_iters: total,
        loss: Vec::with_capacity(total),
        lr: Vec::with_capacity(total),
        saturated: Vec::with_capacity(total),
    };
    let mut slot = vec![u32::MAX; if k.is_some() { n } else { 0 }];

    for iter in 0..total {
        let lr = schedule.lr(iter)?;
        let idx = sampler.draw_batch(batch);
        let mut events = Vec::with_capacity(batch * m);
        let mut targets = Vec::with_capacity(batch);
        for &i in &idx {
            events.extend_from_slice(pool.row(i));
            targets.push(pool.labels[i]);
        }
        let events = Tensor::matrix(batch, m, events)?;
        let context = match k {
            None => None,
            Some(k) => {
                let mut rows = Vec::new();
                let mut index = Vec::with_capacity(batch * k);
                let mut touched = Vec::new();
                for &i in &idx {
                    let s = pool.owner[i] as usize;
                    for local in context_sampler(pool.sizes[s], k, &mut ctx_rng)? {
                        let gi = pool.offsets[s] + local;
                        if slot[gi] == u32::MAX {
                            slot[gi] = touched.len() as u32;
                            touched.push(gi);
                            rows.extend_from_slice(pool.row(gi));
                        }
                        index.push(slot[gi]);
                    }
                }
                for &gi in &touched {
                    slot[gi] = u32::MAX;
                }
                let rows = Tensor::matrix(touched.len(), m, rows)?;
                Some(ContextInput::Rows(ContextRows::from_draws(rows, index, k)?))
            }
        };

        let mut g = Graph::new();
        let probs = model.forward_graph(&mut g, events, context, Mode::Train)?;
        let loss = g.focal_loss(probs, targets, class_weights.weights.clone(), cfg.gamma)?;
        let value = g.value(loss).data()[0];
        let saturated = g.saturated();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                lr,
                saturated,
            });
        }
        model.params.zero_grad();
        g.backward(loss, &mut model.params)?;
        adam_step(&mut model.params, &mut adam, lr)?;
        model.commit_stats(&mut g);
        history.loss.push(value);
        history.lr.push(lr);
        history.saturated.push(saturated);
    }

    Ok((
        TrainedModel {
            model,
            panel,
            class_names,
            transform,
        },
        history,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `[n_events, n_classes]`
    pub probs: Tensor,
}

const PREDICT_CHUNK: usize = 4096;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl TrainedModel {
    /// Reorders the sample's columns to the training panel and applies the fitted transform.
    pub fn prepare(&self, events: &EventTable) -> Result<EventTable> {
        let aligned = events.reorder_to(&self.panel)?;
        self.transform.apply(&aligned)
    }

    /// Probabilities from one context draw per event. Draw `d` uses its own random
    /// stream, so draws are reproducible individually.
    pub fn draw_probs(&self, events: &EventTable, seed: u64, draw: u64) -> Result<Tensor> {
        let prepared = self.prepare(events)?;
        self.draw_probs_prepared(&prepared, seed, draw)
    }

    fn draw_probs_prepared(&self, x: &EventTable, seed: u64, draw: u64) -> Result<Tensor> {
        let n = x.n_events();
        let m = x.n_markers();
        let c = self.class_names.len();
        let all = x.to_tensor()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(draw);
        // eval-mode context rows are independent, so embed each event once and pool
        let embedded = match self.model.config().n_context() {
            Some(_) => Some(self.model.context_embeddings(all.clone())?),
            None => None,
        };
        let mut out = Vec::with_capacity(n * c);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Tensor::matrix(end - start, m, x.intensities()[start * m..end * m].to_vec())?;
            let context = match (&embedded, self.model.config().n_context()) {
                (Some(e), Some(k)) => {
                    let mut index = Vec::with_capacity((end - start) * k);
                    for _ in start..end {
                        index.extend(context_sampler(n, k, &mut rng)?.into_iter().map(|j| j as u32));
                    }
                    Some(ContextInput::Pooled(kernels::gather_mean_canonical(e, &index, k)?))
                }
                _ => None,
            };
            let mut g = Graph::new();
            let p = self.model.forward_graph(&mut g, chunk, context, Mode::Eval)?;
            out.extend_from_slice(g.value(p).data());
        }
        Tensor::matrix(n, c, out)
    }

    /// Labels every event of `events`, averaging probabilities over `n_context_draws`
    /// independent context draws (draws `0..n_context_draws` of [`Self::draw_probs`]).
    pub fn predict(&self, events: &EventTable, n_context_draws: usize, seed: u64) -> Result<Prediction> {
        if n_context_draws == 0 {
            return Err(Error::Config("n_context_draws must be at least 1".into()));
        }
        let prepared = self.prepare(events)?;
        let mut probs = self.draw_probs_prepared(&prepared, seed, 0)?;
        for d in 1..n_context_draws as u64 {
            probs.add_assign(&self.draw_probs_prepared(&prepared, seed, d)?);
        }
        if n_context_draws > 1 {
            let scale = 1.0 / n_context_draws as f64;
            probs.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let c = self.class_names.len();
        let labels = probs.data().chunks(c).map(argmax).collect();
        Ok(Prediction { labels, probs })
    }
}

pub fn predict_sample(model: &TrainedModel, events: &EventTable, n_context_draws: usize, seed: u64) -> Result<Prediction> {
    model.predict(events, n_context_draws, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_rule() {
        let cfg = TrainConfig::default();
        assert_eq!(effective_batch_size(1_000_000, &cfg), 1024);
        assert_eq!(effective_batch_size(100, &cfg), 20);
        assert_eq!(effective_batch_size(4, &cfg), 1);
        assert_eq!(effective_batch_size(1000, &cfg), 200);
        assert_eq!(planned_iterations(1000, 200, &cfg), 50);
        assert_eq!(planned_iterations(8_000_000, 1024, &cfg), 5000);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.5, 0.25]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.beta_loss = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
