//! Hierarchical gating strategies, where each gate becomes its own classification
//! dataset restricted to the events of its parent population.
//!
//! Input samples label every event with the most specific population it was gated
//! into. Ancestry follows from the hierarchy: a population listed as a
//! subpopulation of a stage has that stage's parent as its own parent.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cyto::{EventTable, LabeledSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyStage {
    pub name: String,
    /// `None` for the root stage.
    pub parent: Option<String>,
    pub subpopulations: Vec<String>,
    /// Class for parent events that fall in none of the subpopulations.
    pub remainder: Option<String>,
    pub display_markers: (String, String),
}

impl HierarchyStage {
    pub fn class_names(&self) -> Vec<String> {
        let mut names = self.subpopulations.clone();
        if let Some(r) = &self.remainder {
            names.push(r.clone());
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    stages: Vec<HierarchyStage>,
}

impl HierarchySpec {
    pub fn new(stages: Vec<HierarchyStage>) -> Result<Self> {
        let mut known: Vec<&str> = Vec::new();
        for stage in &stages {
            if let Some(parent) = &stage.parent {
                if !known.contains(&parent.as_str()) {
                    return Err(Error::Config(format!(
                        "stage `{}` has parent `{parent}` that no earlier stage defines",
                        stage.name
                    )));
                }
            }
            known.extend(stage.subpopulations.iter().map(String::as_str));
        }
        Ok(HierarchySpec { stages })
    }

    /// The leukocyte gating strategy used for peripheral blood and CSF panels.
    pub fn rheumaflow() -> Self {
        fn stage(name: &str, parent: Option<&str>, subs: &[&str], remainder: bool, x: &str, y: &str) -> HierarchyStage {
            HierarchyStage {
                name: name.into(),
                parent: parent.map(Into::into),
                subpopulations: subs.iter().map(|s| s.to_string()).collect(),
                remainder: remainder.then(|| "Rest".to_string()),
                display_markers: (x.into(), y.into()),
            }
        }
        HierarchySpec::new(vec![
            stage("Leuko", None, &["Leukocytes", "Rest"], false, "CD45", "SSC"),
            stage("Granulo-Lympho-Mono", Some("Leukocytes"), &["Granulocytes", "Lymphocytes", "Monocytes"], true, "CD14", "SSC"),
            stage("NK-NKT-T", Some("Lymphocytes"), &["NKT cells", "NK cells", "T cells"], true, "CD3", "CD56"),
            stage("B-Plasma", Some("Lymphocytes"), &["B cells", "Plasma cells"], true, "CD19", "CD138"),
            stage("CD56CD16", Some("NK cells"), &["CD56+", "CD56dim CD16+"], true, "CD56", "CD16"),
            stage("CD14CD16", Some("Monocytes"), &["CD14+ CD16+", "CD14+ CD16-", "CD14- CD16+"], true, "CD14", "CD16"),
            stage("CD4CD8", Some("T cells"), &["CD4+ T cells", "CD8+ T cells"], true, "CD4", "CD8"),
            stage("CD4HLADR", Some("CD4+ T cells"), &["HLA-DR+ CD4+ T cells"], true, "CD4", "HLA-DR"),
            stage("CD8HLADR", Some("CD8+ T cells"), &["HLA-DR+ CD8+ T cells"], true, "CD8", "HLA-DR"),
        ])
        .expect("built-in hierarchy is well ordered")
    }

    pub fn stages(&self) -> &[HierarchyStage] {
        &self.stages
    }

    pub fn stage(&self, name: &str) -> Option<&HierarchyStage> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn parent_map(&self) -> HashMap<&str, &str> {
        let mut map = HashMap::new();
        for stage in &self.stages {
            if let Some(p) = &stage.parent {
                for sub in &stage.subpopulations {
                    map.insert(sub.as_str(), p.as_str());
                }
            }
        }
        map
    }
}

/// Samples of one subdataset; samples with no parent-population events are
/// listed in `empty` rather than dropped silently.
#[derive(Debug, Clone)]
pub struct Subdataset {
    pub stage: HierarchyStage,
    pub samples: Vec<LabeledSample>,
    pub empty: Vec<String>,
}

pub fn derive_subdataset(samples: &[LabeledSample], hierarchy: &HierarchySpec, name: &str) -> Result<Subdataset> {
    let stage = hierarchy
        .stage(name)
        .ok_or_else(|| Error::Config(format!("unknown subdataset `{name}`")))?
        .clone();
    let parents = hierarchy.parent_map();
    let class_names = stage.class_names();

    let mut out = Vec::with_capacity(samples.len());
    let mut empty = Vec::new();
    for sample in samples {
        // per input class: Some(child label) if the class lies inside the parent population
        let mut mapping: Vec<Option<usize>> = Vec::with_capacity(sample.n_classes());
        for class in sample.class_names() {
            let mut path = vec![class.as_str()];
            while let Some(&p) = parents.get(path[path.len() - 1]) {
                path.push(p);
            }
            let inside = match &stage.parent {
                None => true,
                Some(p) => path.contains(&p.as_str()),
            };
            if !inside {
                mapping.push(None);
                continue;
            }
            let child = path
                .iter()
                .find_map(|pop| stage.subpopulations.iter().position(|s| s == pop))
                .or_else(|| stage.remainder.as_ref().map(|_| stage.subpopulations.len()));
            match child {
                Some(c) => mapping.push(Some(c)),
                None => {
                    return Err(Error::Validation(format!(
                        "sample `{}`: population `{class}` maps to no class of stage `{name}`",
                        sample.sample_id()
                    )))
                }
            }
        }
        let mut keep = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in sample.labels().iter().enumerate() {
            if let Some(c) = mapping[l] {
                keep.push(i);
                labels.push(c);
            }
        }
        if keep.is_empty() {
            empty.push(sample.sample_id().to_string());
            let events = EventTable::new_unchecked_len(sample.events.panel().clone(), Vec::new(), sample.sample_id())?;
            out.push(LabeledSample::new(events, Vec::new(), class_names.clone())?);
            continue;
        }
        let events = sample.events.select(&keep);
        let mut child = LabeledSample::new(events, labels, class_names.clone())?;
        child.expert_id = sample.expert_id.clone();
        out.push(child);
    }
    Ok(Subdataset {
        stage,
        samples: out,
        empty,
    })
}
