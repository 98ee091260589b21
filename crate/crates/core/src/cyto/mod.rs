//! Flow cytometry samples: marker panels, event tables, labels, and their ingestion.

mod consensus;
mod delimited;
pub mod fcs;
mod hierarchy;
mod stats;
mod transform;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use consensus::{consensus_labels, Consensus};
pub use delimited::{load_csv_sample, read_csv_events, read_csv_labeled, write_csv_sample, LabelColumn, LoadedSample};
pub use fcs::parse_fcs;
pub use hierarchy::{derive_subdataset, HierarchySpec, HierarchyStage, Subdataset};
pub use stats::{dataset_stats, DatasetStats};
pub use transform::{transform_intensities, FittedTransform, TransformSpec};

/// Ordered, uniquely named measurement channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerPanel {
    marker_names: Vec<String>,
}

impl MarkerPanel {
    pub fn new(marker_names: Vec<String>) -> Result<Self> {
        if marker_names.is_empty() {
            return Err(Error::Validation("marker panel is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &marker_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate marker name `{name}`")));
            }
        }
        Ok(MarkerPanel { marker_names })
    }

    pub fn names(&self) -> &[String] {
        &self.marker_names
    }

    pub fn n_markers(&self) -> usize {
        self.marker_names.len()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.marker_names.iter().position(|m| m == name)
    }

    /// Column indices of `self` in `other`'s order, or the names `other` lacks.
    pub fn mapping_from(&self, other: &MarkerPanel) -> Result<Vec<usize>> {
        let mut missing = Vec::new();
        let mut idx = Vec::with_capacity(self.n_markers());
        for name in &self.marker_names {
            match other.position(name) {
                Some(i) => idx.push(i),
                None => missing.push(name.clone()),
            }
        }
        if missing.is_empty() {
            Ok(idx)
        } else {
            Err(Error::PanelMismatch { missing })
        }
    }
}

/// One sample's events as an `n_events × n_markers` row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTable {
    panel: MarkerPanel,
    intensities: Vec<f64>,
    sample_id: String,
}

impl EventTable {
    pub fn new(panel: MarkerPanel, intensities: Vec<f64>, sample_id: impl Into<String>) -> Result<Self> {
        let table = Self::new_unchecked_len(panel, intensities, sample_id)?;
        if table.n_events() == 0 {
            return Err(Error::Validation(format!("sample `{}` has no events", table.sample_id)));
        }
        Ok(table)
    }

    /// Like [`EventTable::new`] but allows zero events; used for flagged empty subsets.
    pub(crate) fn new_unchecked_len(
        panel: MarkerPanel,
        intensities: Vec<f64>,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if intensities.len() % panel.n_markers() != 0 {
            return Err(Error::dim(
                "event table",
                format!("{} values for {} markers", intensities.len(), panel.n_markers()),
            ));
        }
        if let Some(pos) = intensities.iter().position(|v| !v.is_finite()) {
            let m = panel.n_markers();
            return Err(Error::Validation(format!(
                "sample `{sample_id}`: non-finite intensity at event {}, marker `{}`",
                pos / m,
                panel.names()[pos % m]
            )));
        }
        Ok(EventTable {
            panel,
            intensities,
            sample_id,
        })
    }

    pub fn panel(&self) -> &MarkerPanel {
        &self.panel
    }

    pub fn n_events(&self) -> usize {
        self.intensities.len() / self.panel.n_markers()
    }

    pub fn n_markers(&self) -> usize {
        self.panel.n_markers()
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn event(&self, i: usize) -> &[f64] {
        let m = self.n_markers();
        &self.intensities[i * m..(i + 1) * m]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.n_events(), self.n_markers(), self.intensities.clone())
    }

    /// Keeps the events at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> EventTable {
        let mut out = Vec::with_capacity(indices.len() * self.n_markers());
        for &i in indices {
            out.extend_from_slice(self.event(i));
        }
        EventTable {
            panel: self.panel.clone(),
            intensities: out,
            sample_id: self.sample_id.clone(),
        }
    }

    /// Reorders columns to match `target`, failing if any target marker is absent.
    pub fn reorder_to(&self, target: &MarkerPanel) -> Result<EventTable> {
        let map = target.mapping_from(&self.panel)?;
        let m = self.n_markers();
        let mut out = Vec::with_capacity(self.n_events() * target.n_markers());
        for row in self.intensities.chunks(m) {
            out.extend(map.iter().map(|&j| row[j]));
        }
        Ok(EventTable {
            panel: target.clone(),
            intensities: out,
            sample_id: self.sample_id.clone(),
        })
    }

    pub(crate) fn with_intensities(&self, intensities: Vec<f64>) -> Result<EventTable> {
        EventTable::new_unchecked_len(self.panel.clone(), intensities, self.sample_id.clone())
    }
}

/// Events with one class label each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub events: EventTable,
    labels: Vec<usize>,
    class_names: Vec<String>,
    pub expert_id: Option<String>,
}

impl LabeledSample {
    pub fn new(events: EventTable, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if labels.len() != events.n_events() {
            return Err(Error::Validation(format!(
                "sample `{}`: {} labels for {} events",
                events.sample_id(),
                labels.len(),
                events.n_events()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Validation(format!(
                "sample `{}`: label {bad} but only {} classes declared",
                events.sample_id(),
                class_names.len()
            )));
        }
        Ok(LabeledSample {
            events,
            labels,
            class_names,
            expert_id: None,
        })
    }

    pub fn with_expert(mut self, expert: impl Into<String>) -> Self {
        self.expert_id = Some(expert.into());
        self
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_events(&self) -> usize {
        self.events.n_events()
    }

    pub fn sample_id(&self) -> &str {
        self.events.sample_id()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSample {
        LabeledSample {
            events: self.events.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            expert_id: self.expert_id.clone(),
        }
    }

    pub fn with_events(&self, events: EventTable) -> Result<LabeledSample> {
        let mut s = LabeledSample::new(events, self.labels.clone(), self.class_names.clone())?;
        s.expert_id = self.expert_id.clone();
        Ok(s)
    }
}
