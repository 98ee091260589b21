//! Metrics, sample-level cross-validation, expert comparison and learning curves.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cyto::{consensus_labels, LabeledSample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{train, TrainConfig, TrainHistory};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::dim("confusion_matrix", "rows must form a square matrix"));
        }
        Ok(ConfusionMatrix {
            n_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(
                "confusion_matrix",
                format!("{} true labels, {} predictions", truth.len(), predicted.len()),
            ));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::Validation(format!("label outside {n_classes} classes")));
            }
            cm.counts[t * n_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::dim("confusion_matrix", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    /// Support-weighted mean of per-class F1 over classes with support.
    pub weighted_f1: f64,
    /// Plain mean of per-class F1 over classes with support.
    pub unweighted_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and aggregate F1. Classes with zero support are left out of both
/// aggregates; if no class has support the aggregates are NaN.
pub fn f1_scores(cm: &ConfusionMatrix) -> F1Report {
    let c = cm.n_classes;
    let mut precision = vec![0.0; c];
    let mut recall = vec![0.0; c];
    let mut f1 = vec![0.0; c];
    let mut support = vec![0u64; c];
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
        support[k] = row;
        precision[k] = ratio(tp, col);
        recall[k] = ratio(tp, row);
        let s = precision[k] + recall[k];
        f1[k] = if s == 0.0 { 0.0 } else { 2.0 * precision[k] * recall[k] / s };
    }
    let total: u64 = support.iter().sum();
    let present: Vec<usize> = (0..c).filter(|&k| support[k] > 0).collect();
    let (weighted_f1, unweighted_f1) = if present.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            present.iter().map(|&k| support[k] as f64 * f1[k]).sum::<f64>() / total as f64,
            present.iter().map(|&k| f1[k]).sum::<f64>() / present.len() as f64,
        )
    };
    F1Report {
        precision,
        recall,
        f1,
        support,
        weighted_f1,
        unweighted_f1,
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Percentile with linear interpolation between order statistics, `q ∈ [0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub values: Vec<f64>,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Distribution {
    pub fn of(values: Vec<f64>) -> Self {
        Distribution {
            median: percentile(&values, 50.0),
            q25: percentile(&values, 25.0),
            q75: percentile(&values, 75.0),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Shuffled partition into `k` validation folds; the first `n mod k` folds hold one extra sample.
pub fn kfold_split(sample_ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let n = sample_ids.len();
    if n < k {
        return Err(Error::Config(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut val: Vec<usize> = order[start..start + size].to_vec();
        val.sort_unstable();
        start += size;
        let train = (0..n).filter(|i| !val.contains(i)).map(|i| sample_ids[i].clone()).collect();
        folds.push(FoldSplit {
            train,
            validation: val.into_iter().map(|i| sample_ids[i].clone()).collect(),
        });
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub split_seed: u64,
    pub n_context_draws: usize,
    /// Folds trained concurrently.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            split_seed: 0,
            n_context_draws: 1,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub confusion: ConfusionMatrix,
    pub report: F1Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub split: FoldSplit,
    /// Confusion matrix pooled over all validation events of the fold.
    pub confusion: ConfusionMatrix,
    pub report: F1Report,
    pub per_sample: Vec<SampleScore>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub weighted_mean: f64,
    pub weighted_std: f64,
    pub unweighted_mean: f64,
    pub unweighted_std: f64,
}

impl CvReport {
    fn from_folds(folds: Vec<FoldReport>) -> Self {
        let w: Vec<f64> = folds.iter().map(|f| f.report.weighted_f1).collect();
        let u: Vec<f64> = folds.iter().map(|f| f.report.unweighted_f1).collect();
        let (weighted_mean, weighted_std) = mean_std(&w);
        let (unweighted_mean, unweighted_std) = mean_std(&u);
        CvReport {
            folds,
            weighted_mean,
            weighted_std,
            unweighted_mean,
            unweighted_std,
        }
    }

    /// Unweighted F1 of every validation sample across folds.
    pub fn per_sample_unweighted(&self) -> Vec<f64> {
        self.folds
            .iter()
            .flat_map(|f| f.per_sample.iter().map(|s| s.report.unweighted_f1))
            .filter(|v| v.is_finite())
            .collect()
    }
}

/// Training seed for fold `fold` of a run seeded with `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64 + 1).wrapping_mul(1_000_003))
}

fn check_ids(samples: &[LabeledSample]) -> Result<Vec<String>> {
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id().to_string()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("sample ids must be unique for cross-validation".into()));
    }
    Ok(ids)
}

fn lookup<'a>(samples: &'a [LabeledSample], ids: &[String]) -> Vec<&'a LabeledSample> {
    ids.iter()
        .map(|id| samples.iter().find(|s| s.sample_id() == id).expect("id from split"))
        .collect()
}

/// Trains on `train_ids`, scores each validation sample and the pooled fold.
pub fn run_fold(
    samples: &[LabeledSample],
    fold: usize,
    split: FoldSplit,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<FoldReport> {
    let train_set = lookup(samples, &split.train);
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = fold_seed(cfg.seed, fold);
    let (trained, history) = train(model_config, &train_set, &fold_cfg)?;
    let c = trained.class_names.len();
    let mut pooled = ConfusionMatrix::new(c);
    let mut per_sample = Vec::new();
    for (i, s) in lookup(samples, &split.validation).into_iter().enumerate() {
        if s.n_events() == 0 {
            continue;
        }
        let pred = trained.predict(&s.events, eval.n_context_draws, fold_seed(fold_cfg.seed, i))?;
        let cm = ConfusionMatrix::from_labels(s.labels(), &pred.labels, c)?;
        pooled.merge(&cm)?;
        per_sample.push(SampleScore {
            sample_id: s.sample_id().to_string(),
            report: f1_scores(&cm),
            confusion: cm,
        });
    }
    Ok(FoldReport {
        fold,
        split,
        report: f1_scores(&pooled),
        confusion: pooled,
        per_sample,
        history,
    })
}

/// Runs `jobs` on up to `workers` threads, preserving order.
fn run_parallel<T: Send>(
    workers: usize,
    jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>,
) -> Vec<Result<T>> {
    let n = jobs.len();
    if workers <= 1 || n <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new((0..n).map(|_| None).collect::<Vec<Option<Result<T>>>>());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue").pop();
                let Some((i, job)) = next else { break };
                let r = job();
                results.lock().expect("results")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn collect_folds(results: Vec<Result<FoldReport>>) -> Result<Vec<FoldReport>> {
    results
        .into_iter()
        .enumerate()
        .map(|(fold, r)| {
            r.map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Sample-level k-fold cross-validation.
pub fn cross_validate(
    samples: &[LabeledSample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<CvReport> {
    let ids = check_ids(samples)?;
    let splits = kfold_split(&ids, eval.k, eval.split_seed)?;
    let jobs: Vec<Box<dyn FnOnce() -> Result<FoldReport> + Send + '_>> = splits
        .into_iter()
        .enumerate()
        .map(|(f, split)| {
            Box::new(move || run_fold(samples, f, split, model_config, cfg, eval)) as Box<dyn FnOnce() -> _ + Send>
        })
        .collect();
    Ok(CvReport::from_folds(collect_folds(run_parallel(eval.workers, jobs))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSize {
    Count(usize),
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    pub size: TrainSize,
    pub cv: CvReport,
    /// Per-validation-sample unweighted F1 across folds.
    pub unweighted: Distribution,
    pub weighted: Distribution,
}

/// Cross-validation repeated with training sets subsampled (without replacement)
/// from each training fold. Folds and training seeds are those of [`cross_validate`].
pub fn learning_curve(
    samples: &[LabeledSample],
    sizes: &[TrainSize],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<LearningCurvePoint>> {
    let ids = check_ids(samples)?;
    let splits = kfold_split(&ids, eval.k, eval.split_seed)?;
    let smallest = splits.iter().map(|s| s.train.len()).min().unwrap_or(0);
    for size in sizes {
        if let TrainSize::Count(n) = *size {
            if n == 0 || n > smallest {
                return Err(Error::Config(format!(
                    "training size {n} is outside 1..={smallest} (smallest training fold)"
                )));
            }
        }
    }
    let mut points = Vec::with_capacity(sizes.len());
    for (si, &size) in sizes.iter().enumerate() {
        let jobs: Vec<Box<dyn FnOnce() -> Result<FoldReport> + Send + '_>> = splits
            .iter()
            .enumerate()
            .map(|(f, split)| {
                let mut split = split.clone();
                if let TrainSize::Count(n) = size {
                    if n < split.train.len() {
                        let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(eval.split_seed, f));
                        rng.set_stream(si as u64 + 1);
                        let mut keep = rand::seq::index::sample(&mut rng, split.train.len(), n).into_vec();
                        keep.sort_unstable();
                        split.train = keep.into_iter().map(|i| split.train[i].clone()).collect();
                    }
                }
                Box::new(move || run_fold(samples, f, split, model_config, cfg, eval)) as Box<dyn FnOnce() -> _ + Send>
            })
            .collect();
        let cv = CvReport::from_folds(collect_folds(run_parallel(eval.workers, jobs))?);
        let per_sample: Vec<&F1Report> = cv.folds.iter().flat_map(|f| f.per_sample.iter().map(|s| &s.report)).collect();
        let unweighted = Distribution::of(per_sample.iter().map(|r| r.unweighted_f1).filter(|v| v.is_finite()).collect());
        let weighted = Distribution::of(per_sample.iter().map(|r| r.weighted_f1).filter(|v| v.is_finite()).collect());
        points.push(LearningCurvePoint {
            size,
            cv,
            unweighted,
            weighted,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertScores {
    pub expert: String,
    /// Per-sample scores against the majority vote of the other experts.
    pub consensus_unweighted: Distribution,
    pub consensus_weighted: Distribution,
    /// Per-sample mean of the scores against each other expert separately.
    pub pairwise_unweighted: Distribution,
    pub pairwise_weighted: Distribution,
}

/// Leave-one-expert-out agreement. `gatings[e][s]` is expert `e`'s labeling of sample `s`.
pub fn expert_loo_eval(gatings: &[Vec<LabeledSample>]) -> Result<Vec<ExpertScores>> {
    let n_experts = gatings.len();
    if n_experts < 3 {
        return Err(Error::Alignment(format!(
            "leave-one-out comparison needs at least 3 experts, got {n_experts}"
        )));
    }
    let n_samples = gatings[0].len();
    if gatings.iter().any(|g| g.len() != n_samples) {
        return Err(Error::Alignment("experts labeled different numbers of samples".into()));
    }
    let mut out = Vec::with_capacity(n_experts);
    for e in 0..n_experts {
        let mut cu = Vec::new();
        let mut cw = Vec::new();
        let mut pu = Vec::new();
        let mut pw = Vec::new();
        for s in 0..n_samples {
            let own = &gatings[e][s];
            let others: Vec<&LabeledSample> = (0..n_experts).filter(|&o| o != e).map(|o| &gatings[o][s]).collect();
            let consensus = consensus_labels(&others)?;
            let c = own.n_classes();
            if consensus.sample.n_classes() != c || own.n_events() != consensus.sample.n_events() {
                return Err(Error::Alignment(format!("expert {e} disagrees on the shape of sample {s}")));
            }
            let r = f1_scores(&ConfusionMatrix::from_labels(consensus.sample.labels(), own.labels(), c)?);
            cu.push(r.unweighted_f1);
            cw.push(r.weighted_f1);
            let pair: Vec<F1Report> = others
                .iter()
                .map(|o| Ok(f1_scores(&ConfusionMatrix::from_labels(o.labels(), own.labels(), c)?)))
                .collect::<Result<_>>()?;
            pu.push(pair.iter().map(|r| r.unweighted_f1).sum::<f64>() / pair.len() as f64);
            pw.push(pair.iter().map(|r| r.weighted_f1).sum::<f64>() / pair.len() as f64);
        }
        let name = gatings[e]
            .first()
            .and_then(|s| s.expert_id.clone())
            .unwrap_or_else(|| format!("expert_{e}"));
        out.push(ExpertScores {
            expert: name,
            consensus_unweighted: Distribution::of(cu),
            consensus_weighted: Distribution::of(cw),
            pairwise_unweighted: Distribution::of(pu),
            pairwise_weighted: Distribution::of(pw),
        });
    }
    Ok(out)
}
