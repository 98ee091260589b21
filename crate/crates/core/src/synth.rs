//! Synthetic multi-sample cytometry data with per-sample batch effects.
//!
//! Each sample draws one global translation and one per-marker gain, plus a small
//! drift of every population mean. Events are Gaussian draws from their population,
//! then mapped through `gain ⊙ x + shift`. Within a sample the population structure is
//! intact; across samples the populations move, which is what a context-free
//! classifier cannot undo.
//!
//! Spec files are TOML:
//!
//! ```toml
//! marker_names = ["m0", "m1"]
//! n_samples = 20
//! seed = 7
//!
//! [events_per_sample]
//! median = 2000.0
//! dispersion = 0.0      # sigma of ln(n_events)
//!
//! [batch_effect]
//! shift_scale = 5.0
//! gain_range = [0.9, 1.1]
//! population_jitter = 0.2
//!
//! [[populations]]
//! class_name = "A"
//! mean = [0.0, 0.0]
//! covariance = [[1.0, 0.0], [0.0, 1.0]]
//! frequency = 1.0
//! ```

use std::f64::consts::SQRT_2;

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cyto::{EventTable, LabeledSample, MarkerPanel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub class_name: String,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEffectSpec {
    /// Standard deviation of the per-sample translation, per marker.
    pub shift_scale: f64,
    /// Interval of the per-sample, per-marker multiplicative gain.
    pub gain_range: (f64, f64),
    /// Standard deviation of the per-sample drift of each population mean.
    pub population_jitter: f64,
}

impl BatchEffectSpec {
    pub fn none() -> Self {
        BatchEffectSpec {
            shift_scale: 0.0,
            gain_range: (1.0, 1.0),
            population_jitter: 0.0,
        }
    }
}

/// Log-normal sample sizes: `median · exp(dispersion · N(0, 1))`, at least one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventCountSpec {
    pub median: f64,
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub marker_names: Vec<String>,
    pub populations: Vec<PopulationSpec>,
    pub batch_effect: BatchEffectSpec,
    pub n_samples: usize,
    pub events_per_sample: EventCountSpec,
    pub seed: u64,
}

/// Per-sample batch-effect draws. Diagnostics only; no training API accepts it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub sample_id: String,
    pub shift: Vec<f64>,
    pub gain: Vec<f64>,
    pub population_drift: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<LabeledSample>,
    truth: Vec<SampleTruth>,
}

impl SynthDataset {
    pub fn diagnostics(&self) -> &[SampleTruth] {
        &self.truth
    }
}

/// Lower-triangular factor of a positive semi-definite matrix.
fn psd_factor(cov: &[Vec<f64>], name: &str) -> Result<Vec<Vec<f64>>> {
    let n = cov.len();
    if cov.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("population `{name}`: covariance is not square")));
    }
    for i in 0..n {
        for j in 0..i {
            if (cov[i][j] - cov[j][i]).abs() > 1e-12 * (1.0 + cov[i][j].abs()) {
                return Err(Error::Config(format!("population `{name}`: covariance is not symmetric")));
            }
        }
    }
    let scale = (0..n).map(|i| cov[i][i].abs()).fold(1.0, f64::max);
    let tol = 1e-12 * scale;
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = cov[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -tol {
            return Err(Error::Config(format!("population `{name}`: covariance is not positive semi-definite")));
        }
        let pivot = if d > tol { d.sqrt() } else { 0.0 };
        l[j][j] = pivot;
        for i in j + 1..n {
            let r = cov[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if pivot == 0.0 {
                if r.abs() > tol.sqrt() {
                    return Err(Error::Config(format!(
                        "population `{name}`: covariance is not positive semi-definite"
                    )));
                }
            } else {
                l[i][j] = r / pivot;
            }
        }
    }
    Ok(l)
}

impl SynthDatasetSpec {
    pub fn n_markers(&self) -> usize {
        self.marker_names.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.populations.iter().map(|p| p.class_name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_markers();
        MarkerPanel::new(self.marker_names.clone())?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if self.populations.is_empty() {
            return Err(Error::Config("no populations".into()));
        }
        let mut total = 0.0;
        for p in &self.populations {
            if p.mean.len() != m || p.covariance.len() != m {
                return Err(Error::Config(format!("population `{}` has the wrong dimension", p.class_name)));
            }
            if !(p.frequency > 0.0 && p.frequency <= 1.0) {
                return Err(Error::Config(format!("population `{}` frequency must lie in (0, 1]", p.class_name)));
            }
            psd_factor(&p.covariance, &p.class_name)?;
            total += p.frequency;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("population frequencies sum to {total}, not 1")));
        }
        let be = &self.batch_effect;
        if !(be.shift_scale >= 0.0) || !(be.population_jitter >= 0.0) {
            return Err(Error::Config("batch-effect scales must be non-negative".into()));
        }
        let (lo, hi) = be.gain_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("gain range ({lo}, {hi}) must lie in (0, inf)")));
        }
        let e = &self.events_per_sample;
        if !(e.median >= 1.0) || !(e.dispersion >= 0.0) {
            return Err(Error::Config("events_per_sample needs median >= 1 and dispersion >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthDatasetSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("synthetic spec: {e}")))
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates sample `sample_index`; the stream depends only on `(spec.seed, sample_index)`.
pub fn generate_sample(spec: &SynthDatasetSpec, sample_index: usize) -> Result<(LabeledSample, SampleTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(sample_index as u64 + 1);
    generate_sample_with(spec, sample_index, &mut rng)
}

pub fn generate_sample_with<R: Rng + ?Sized>(
    spec: &SynthDatasetSpec,
    sample_index: usize,
    rng: &mut R,
) -> Result<(LabeledSample, SampleTruth)> {
    let m = spec.n_markers();
    let factors: Vec<Vec<Vec<f64>>> = spec
        .populations
        .iter()
        .map(|p| psd_factor(&p.covariance, &p.class_name))
        .collect::<Result<_>>()?;

    let e = &spec.events_per_sample;
    let n_events = ((e.median * (e.dispersion * normal(rng)).exp()).round() as usize).max(1);
    let be = &spec.batch_effect;
    let shift: Vec<f64> = (0..m).map(|_| be.shift_scale * normal(rng)).collect();
    let (lo, hi) = be.gain_range;
    let gain: Vec<f64> = if hi > lo {
        let u = Uniform::new_inclusive(lo, hi).map_err(|e| Error::Config(e.to_string()))?;
        (0..m).map(|_| u.sample(rng)).collect()
    } else {
        vec![lo; m]
    };
    let drift: Vec<Vec<f64>> = spec
        .populations
        .iter()
        .map(|_| (0..m).map(|_| be.population_jitter * normal(rng)).collect())
        .collect();

    let freqs: Vec<f64> = spec.populations.iter().map(|p| p.frequency).collect();
    let classes = WeightedIndex::new(&freqs).map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(n_events * m);
    let mut labels = Vec::with_capacity(n_events);
    let mut z = vec![0.0; m];
    for _ in 0..n_events {
        let c = classes.sample(rng);
        z.iter_mut().for_each(|v| *v = normal(rng));
        let pop = &spec.populations[c];
        let l = &factors[c];
        for j in 0..m {
            let noise: f64 = (0..=j).map(|k| l[j][k] * z[k]).sum();
            let x = pop.mean[j] + drift[c][j] + noise;
            values.push(gain[j] * x + shift[j]);
        }
        labels.push(c);
    }
    let sample_id = format!("synth_{sample_index:03}");
    let panel = MarkerPanel::new(spec.marker_names.clone())?;
    let events = EventTable::new(panel, values, sample_id.clone())?;
    let sample = LabeledSample::new(events, labels, spec.class_names())?;
    Ok((
        sample,
        SampleTruth {
            sample_id,
            shift,
            gain,
            population_drift: drift,
        },
    ))
}

pub fn generate_dataset(spec: &SynthDatasetSpec) -> Result<SynthDataset> {
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut truth = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let (s, t) = generate_sample(spec, i)?;
        samples.push(s);
        truth.push(t);
    }
    Ok(SynthDataset { samples, truth })
}

fn identity(m: usize, var: f64) -> Vec<Vec<f64>> {
    (0..m).map(|i| (0..m).map(|j| if i == j { var } else { 0.0 }).collect()).collect()
}

fn population(name: &str, mean: &[f64], frequency: f64) -> PopulationSpec {
    PopulationSpec {
        class_name: name.to_string(),
        mean: mean.to_vec(),
        covariance: identity(mean.len(), 1.0),
        frequency,
    }
}

/// Named benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Well-spread populations, no batch effect.
    Separable,
    /// Populations separable within each sample but confused across samples
    /// by large per-sample translations.
    BatchHard,
    /// One population at frequency 0.001.
    RareClass,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Preset::Separable),
            "batch_hard" => Ok(Preset::BatchHard),
            "rare_class" => Ok(Preset::RareClass),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected separable, batch_hard or rare_class)"
            ))),
        }
    }
}

pub const BATCH_HARD_SEPARATION: f64 = 7.0;
pub const BATCH_HARD_SHIFT: f64 = 3.5;

pub fn benchmark_preset(preset: Preset) -> SynthDatasetSpec {
    let markers: Vec<String> = ["FSC", "SSC", "CD3", "CD19"].iter().map(|s| s.to_string()).collect();
    match preset {
        Preset::Separable => SynthDatasetSpec {
            marker_names: markers,
            populations: vec![
                population("A", &[0.0, 0.0, 0.0, 0.0], 0.5),
                population("B", &[10.0, 0.0, 0.0, 0.0], 0.3),
                population("C", &[0.0, 10.0, 0.0, 0.0], 0.2),
            ],
            batch_effect: BatchEffectSpec::none(),
            n_samples: 10,
            events_per_sample: EventCountSpec {
                median: 2000.0,
                dispersion: 0.0,
            },
            seed: 1,
        },
        Preset::BatchHard => {
            // two scatter-like channels, every one of them informative and shifted
            let d = BATCH_HARD_SEPARATION;
            SynthDatasetSpec {
                marker_names: vec!["FSC".into(), "SSC".into()],
                populations: vec![
                    population("A", &[0.0, 0.0], 0.5),
                    population("B", &[d, 0.0], 0.3),
                    population("C", &[d / 2.0, d * 3f64.sqrt() / 2.0], 0.2),
                ],
                batch_effect: BatchEffectSpec {
                    shift_scale: BATCH_HARD_SHIFT,
                    gain_range: (0.95, 1.05),
                    population_jitter: 0.2,
                },
                n_samples: 20,
                events_per_sample: EventCountSpec {
                    median: 2000.0,
                    dispersion: 0.0,
                },
                seed: 2,
            }
        }
        Preset::RareClass => SynthDatasetSpec {
            marker_names: markers,
            populations: vec![
                population("A", &[0.0, 0.0, 0.0, 0.0], 0.699),
                population("B", &[8.0, 0.0, 0.0, 0.0], 0.3),
                // well apart from both others: hard only because it is rare
                population("Rare", &[0.0, 4.0 * SQRT_2, 4.0 * SQRT_2, 0.0], 0.001),
            ],
            batch_effect: BatchEffectSpec {
                shift_scale: 0.5,
                gain_range: (1.0, 1.0),
                population_jitter: 0.1,
            },
            n_samples: 10,
            events_per_sample: EventCountSpec {
                median: 3000.0,
                dispersion: 0.0,
            },
            seed: 3,
        },
    }
}
