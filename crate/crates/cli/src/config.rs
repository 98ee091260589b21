//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use gatenet::eval::{EvalConfig, TrainSize};
use gatenet::model::{BaselineConfig, GateNetConfig, ModelConfig};
use gatenet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Gatenet,
    Baseline,
}

/// Model shape without the data-dependent sizes (markers, classes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub n_context: usize,
    pub single_block_filters: Vec<usize>,
    pub context_block_filters: Vec<usize>,
    pub head_hidden: usize,
    pub baseline_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let g = GateNetConfig::new(1, 1);
        ModelSection {
            architecture: Architecture::Gatenet,
            n_context: g.n_context,
            single_block_filters: g.single_block_filters,
            context_block_filters: g.context_block_filters,
            head_hidden: g.head_hidden,
            baseline_hidden: BaselineConfig::new(1, 1).hidden,
        }
    }
}

impl ModelSection {
    /// The model seed is replaced by the training seed during training.
    pub fn build(&self, n_markers: usize, n_classes: usize) -> ModelConfig {
        match self.architecture {
            Architecture::Gatenet => ModelConfig::GateNet(GateNetConfig {
                n_markers,
                n_classes,
                n_context: self.n_context,
                single_block_filters: self.single_block_filters.clone(),
                context_block_filters: self.context_block_filters.clone(),
                head_hidden: self.head_hidden,
                seed: 0,
            }),
            Architecture::Baseline => ModelConfig::Baseline(BaselineConfig {
                n_markers,
                n_classes,
                hidden: self.baseline_hidden.clone(),
                seed: 0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of CSV samples. Class names come from `class_names` or, when
    /// that is empty, from the directory's `dataset.toml`.
    pub dir: Option<PathBuf>,
    pub class_names: Vec<String>,
    pub label_column: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            class_names: Vec::new(),
            label_column: "label".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub n_context_draws: usize,
    pub seed: u64,
    /// Marker pairs for plot data; empty means the first two markers.
    pub plot_pairs: Vec<(String, String)>,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            n_context_draws: 1,
            seed: 0,
            plot_pairs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningCurveSection {
    /// Training-set sizes; `"all"` uses the whole training fold.
    pub sizes: Vec<String>,
}

impl Default for LearningCurveSection {
    fn default() -> Self {
        LearningCurveSection {
            sizes: ["2", "5", "10", "20", "all"].map(String::from).to_vec(),
        }
    }
}

impl LearningCurveSection {
    pub fn parse_sizes(&self) -> Result<Vec<TrainSize>, Failure> {
        self.sizes
            .iter()
            .map(|s| match s.as_str() {
                "all" => Ok(TrainSize::All),
                n => n
                    .parse()
                    .map(TrainSize::Count)
                    .map_err(|_| Failure::config(format!("learning_curve.sizes: `{n}` is neither a count nor `all`"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub preset: Option<String>,
    /// Spec file, used instead of a preset.
    pub spec: Option<PathBuf>,
    pub n_samples: Option<usize>,
    pub events_per_sample: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub events: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { events: 20_000, repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub predict: PredictSection,
    pub learning_curve: LearningCurveSection,
    pub synth: SynthSection,
    pub sweep: SweepSection,
    pub bench: BenchSection,
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn from_table(table: toml::Table) -> Result<RunConfig, Failure> {
    RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Failure::config(format!("configuration: {e}")))
}

pub fn read_table(path: &Path) -> Result<toml::Table, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}
