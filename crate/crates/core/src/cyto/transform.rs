use serde::{Deserialize, Serialize};

use crate::cyto::EventTable;
use crate::error::{Error, Result};

/// Requested intensity transform, before any statistics are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    None,
    Asinh {
        cofactor: f64,
    },
    #[default]
    Zscore,
}

/// A transform ready to apply; z-score carries per-marker training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedTransform {
    None,
    Asinh { cofactor: f64 },
    Zscore { mean: Vec<f64>, std: Vec<f64> },
}

impl FittedTransform {
    /// Fits `spec` on training samples only. Standard deviations are population (ddof 0).
    pub fn fit<'a>(spec: &TransformSpec, training: impl IntoIterator<Item = &'a EventTable>) -> Result<Self> {
        match spec {
            TransformSpec::None => Ok(FittedTransform::None),
            TransformSpec::Asinh { cofactor } => {
                if !(*cofactor > 0.0) {
                    return Err(Error::Config(format!("asinh cofactor must be positive, got {cofactor}")));
                }
                Ok(FittedTransform::Asinh { cofactor: *cofactor })
            }
            TransformSpec::Zscore => {
                let tables: Vec<&EventTable> = training.into_iter().collect();
                let Some(first) = tables.first() else {
                    return Err(Error::Validation("z-score needs at least one training sample".into()));
                };
                let panel = first.panel().clone();
                let m = panel.n_markers();
                let mut count = 0usize;
                let mut mean = vec![0.0; m];
                for t in &tables {
                    if t.panel() != &panel {
                        return Err(Error::Validation(format!(
                            "sample `{}` has a different marker panel",
                            t.sample_id()
                        )));
                    }
                    for row in t.intensities().chunks(m) {
                        for (acc, v) in mean.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    count += t.n_events();
                }
                mean.iter_mut().for_each(|v| *v /= count as f64);
                let mut var = vec![0.0; m];
                for t in &tables {
                    for row in t.intensities().chunks(m) {
                        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                            *acc += (v - mu) * (v - mu);
                        }
                    }
                }
                let std: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt()).collect();
                if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
                    return Err(Error::Validation(format!(
                        "marker `{}` has zero standard deviation in the training samples",
                        panel.names()[j]
                    )));
                }
                Ok(FittedTransform::Zscore { mean, std })
            }
        }
    }

    pub fn apply(&self, events: &EventTable) -> Result<EventTable> {
        match self {
            FittedTransform::None => Ok(events.clone()),
            FittedTransform::Asinh { cofactor } => {
                let out = events.intensities().iter().map(|v| (v / cofactor).asinh()).collect();
                events.with_intensities(out)
            }
            FittedTransform::Zscore { mean, std } => {
                let m = events.n_markers();
                if mean.len() != m {
                    return Err(Error::dim(
                        "transform",
                        format!("statistics for {} markers, sample has {m}", mean.len()),
                    ));
                }
                let mut out = events.intensities().to_vec();
                for row in out.chunks_mut(m) {
                    for ((v, mu), sd) in row.iter_mut().zip(mean).zip(std) {
                        *v = (*v - mu) / sd;
                    }
                }
                events.with_intensities(out)
            }
        }
    }
}

/// Applies a fitted transform; the spec-level entry point.
pub fn transform_intensities(events: &EventTable, transform: &FittedTransform) -> Result<EventTable> {
    transform.apply(events)
}
