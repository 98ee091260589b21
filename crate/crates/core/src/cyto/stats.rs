use serde::{Deserialize, Serialize};

use crate::cyto::LabeledSample;
use crate::error::{Error, Result};

/// Summary statistics of a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub events_mean: f64,
    pub events_std: f64,
    pub n_markers: usize,
    pub n_classes: usize,
    /// Class with the fewest events over the whole dataset.
    pub minority_class: String,
    /// Per-sample share of minority-class events, in percent.
    pub minority_pct_mean: f64,
    pub minority_pct_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn dataset_stats(samples: &[LabeledSample]) -> Result<DatasetStats> {
    let Some(first) = samples.first() else {
        return Err(Error::Validation("dataset has no samples".into()));
    };
    let c = first.n_classes();
    let mut totals = vec![0usize; c];
    for s in samples {
        for (t, n) in totals.iter_mut().zip(s.class_counts()) {
            *t += n;
        }
    }
    let minority = (0..c)
        .filter(|&k| totals[k] > 0)
        .min_by_key(|&k| totals[k])
        .unwrap_or(0);
    let sizes: Vec<f64> = samples.iter().map(|s| s.n_events() as f64).collect();
    let shares: Vec<f64> = samples
        .iter()
        .filter(|s| s.n_events() > 0)
        .map(|s| 100.0 * s.class_counts()[minority] as f64 / s.n_events() as f64)
        .collect();
    let (events_mean, events_std) = mean_std(&sizes);
    let (minority_pct_mean, minority_pct_std) = mean_std(&shares);
    Ok(DatasetStats {
        n_samples: samples.len(),
        events_mean,
        events_std,
        n_markers: first.events.n_markers(),
        n_classes: c,
        minority_class: first.class_names()[minority].clone(),
        minority_pct_mean,
        minority_pct_std,
    })
}
