//! Class-imbalance handling: effective-number class weights, class-balanced
//! event sampling, focal loss, and context-event sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// One positive weight per class, normalized to sum to the number of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; n_classes],
            beta: 0.0,
        }
    }
}

/// Raw per-class weight `(1−β)/(1−β^n)`; the reciprocal of the effective number of samples.
fn raw_weight(count: usize, beta: f64) -> f64 {
    if count == 0 {
        return 0.0;
    }
    if beta == 0.0 {
        return 1.0;
    }
    // (1−β)/(1−β^n) with 1−β^n = −expm1(n·ln β), accurate for β near 1
    let one_minus_beta = 1.0 - beta;
    let one_minus_pow = -(count as f64 * beta.ln()).exp_m1();
    one_minus_beta / one_minus_pow
}

pub fn effective_number_weights(class_counts: &[usize], beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    if class_counts.iter().all(|&c| c == 0) {
        return Err(Error::Validation("all class counts are zero".into()));
    }
    let raw: Vec<f64> = class_counts.iter().map(|&c| raw_weight(c, beta)).collect();
    let total: f64 = raw.iter().sum();
    let scale = class_counts.len() as f64 / total;
    Ok(ClassWeights {
        weights: raw.iter().map(|w| w * scale).collect(),
        beta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub class_weights: ClassWeights,
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Result of a focal-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLoss {
    pub value: f64,
    /// Rows whose target probability was clamped to 1e-12.
    pub saturated: usize,
}

pub fn focal_loss(probs: &Tensor, targets: &[usize], cfg: &FocalLossConfig) -> Result<FocalLoss> {
    cfg.validate()?;
    let (value, saturated) = kernels::focal_loss(probs, targets, &cfg.class_weights.weights, cfg.gamma)?;
    Ok(FocalLoss { value, saturated })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub beta_sampling: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            beta_sampling: 0.999,
            seed: 0,
        }
    }
}

/// Draws training-event indices with replacement; each event's probability is its
/// class's effective-number weight divided by the class count.
///
/// Sampling is done in two stages (class by weight, then a uniform member of the
/// class), which yields exactly that per-event distribution.
#[derive(Debug, Clone)]
pub struct EventSampler {
    rng: ChaCha8Rng,
    classes: WeightedIndex<f64>,
    members: Vec<Vec<usize>>,
}

impl EventSampler {
    pub fn new(labels: &[usize], n_classes: usize, cfg: &SamplerConfig) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("event sampler needs at least one event".into()));
        }
        let mut members = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::Validation(format!("label {l} >= {n_classes} classes")));
            }
            members[l].push(i);
        }
        let counts: Vec<usize> = members.iter().map(Vec::len).collect();
        let w = effective_number_weights(&counts, cfg.beta_sampling)?;
        let classes = WeightedIndex::new(&w.weights)
            .map_err(|e| Error::Validation(format!("sampling weights: {e}")))?;
        Ok(EventSampler {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            classes,
            members,
        })
    }

    /// Uniform sampling with replacement, ignoring class labels.
    pub fn uniform(n_events: usize, seed: u64) -> Result<Self> {
        EventSampler::new(&vec![0; n_events], 1, &SamplerConfig { beta_sampling: 0.0, seed })
    }

    pub fn draw(&mut self) -> usize {
        let c = self.classes.sample(&mut self.rng);
        let m = &self.members[c];
        m[self.rng.random_range(0..m.len())]
    }

    pub fn draw_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.draw()).collect()
    }
}

impl Iterator for EventSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.draw())
    }
}

/// Draws `k` context events from a sample of `n_events`: without replacement
/// when the sample is large enough, otherwise uniformly with replacement.
pub fn context_sampler<R: Rng + ?Sized>(n_events: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_events == 0 {
        return Err(Error::Validation("cannot draw context events from an empty sample".into()));
    }
    if k == 0 {
        return Err(Error::EmptyContext);
    }
    if n_events >= k {
        Ok(rand::seq::index::sample(rng, n_events, k).into_vec())
    } else {
        Ok((0..k).map(|_| rng.random_range(0..n_events)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_counts_give_unit_weights() {
        let w = effective_number_weights(&[1, 1, 1], 0.99).unwrap();
        assert_eq!(w.weights, vec![1.0, 1.0, 1.0]);
        let w0 = effective_number_weights(&[3, 500, 7], 0.0).unwrap();
        assert_eq!(w0.weights, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_count_class_gets_zero_weight() {
        let w = effective_number_weights(&[0, 10, 10], 0.9).unwrap();
        assert_eq!(w.weights[0], 0.0);
        assert!((w.weights[1] - 1.5).abs() < 1e-15);
        assert!(effective_number_weights(&[0, 0], 0.9).is_err());
        assert!(effective_number_weights(&[1], 1.0).is_err());
    }

    #[test]
    fn context_draw_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut perm = context_sampler(50, 50, &mut rng).unwrap();
        perm.sort_unstable();
        assert_eq!(perm, (0..50).collect::<Vec<_>>());
        assert_eq!(context_sampler(1, 7, &mut rng).unwrap(), vec![0; 7]);
        assert!(context_sampler(0, 7, &mut rng).is_err());
        let short = context_sampler(3, 10, &mut rng).unwrap();
        assert_eq!(short.len(), 10);
        assert!(short.iter().all(|&i| i < 3));
    }

    #[test]
    fn sampler_is_deterministic() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 7 == 0)).collect();
        let cfg = SamplerConfig { beta_sampling: 0.999, seed: 11 };
        let a: Vec<usize> = EventSampler::new(&labels, 2, &cfg).unwrap().take(500).collect();
        let b: Vec<usize> = EventSampler::new(&labels, 2, &cfg).unwrap().take(500).collect();
        assert_eq!(a, b);
    }
}
