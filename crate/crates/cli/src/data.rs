//! Dataset directories: CSV samples plus a `dataset.toml` naming the classes that
//! the integer label column indexes.

use std::path::{Path, PathBuf};

use gatenet::cyto::{load_csv_sample, parse_fcs, write_csv_sample, EventTable, LabelColumn, LabeledSample, LoadedSample};
use serde::{Deserialize, Serialize};

use crate::config::DataSection;
use crate::failure::{Context, Failure};
use crate::output::Run;

pub const DATASET_FILE: &str = "dataset.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
}

pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::data(format!("{}: no .csv samples", dir.display())));
    }
    Ok(files)
}

fn label_column(dir: &Path, section: &DataSection, run: &mut Run) -> Result<LabelColumn, Failure> {
    if !section.class_names.is_empty() {
        return Ok(LabelColumn {
            column: section.label_column.clone(),
            class_names: section.class_names.clone(),
        });
    }
    let meta_path = dir.join(DATASET_FILE);
    if !meta_path.exists() {
        return Err(Failure::data(format!(
            "{}: no class names (set data.class_names or add {DATASET_FILE})",
            dir.display()
        )));
    }
    run.input(&meta_path)?;
    let text = std::fs::read_to_string(&meta_path).at(&meta_path)?;
    let meta: DatasetMeta = toml::from_str(&text).map_err(|e| Failure::data(e.to_string()).at(&meta_path))?;
    Ok(LabelColumn {
        column: section.label_column.clone(),
        class_names: meta.class_names,
    })
}

pub fn load_labeled_dir(dir: &Path, section: &DataSection, run: &mut Run) -> Result<Vec<LabeledSample>, Failure> {
    let label = label_column(dir, section, run)?;
    let mut samples = Vec::new();
    for path in csv_files(dir)? {
        run.input(&path)?;
        match load_csv_sample(&path, Some(&label)).at(&path)? {
            LoadedSample::Labeled(s) => samples.push(s),
            LoadedSample::Events(_) => unreachable!("a label column was requested"),
        }
    }
    Ok(samples)
}

pub fn data_dir(section: &DataSection, flag: Option<&PathBuf>) -> Result<PathBuf, Failure> {
    flag.or(section.dir.as_ref())
        .cloned()
        .ok_or_else(|| Failure::config("no dataset given (use --data or data.dir)"))
}

/// Unlabeled events from a CSV or FCS file.
pub fn load_events(path: &Path, run: &mut Run) -> Result<EventTable, Failure> {
    run.input(path)?;
    let is_fcs = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("fcs"));
    if is_fcs {
        let bytes = std::fs::read(path).at(path)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (_, events) = parse_fcs(&bytes, &id).at(path)?;
        Ok(events)
    } else {
        match load_csv_sample(path, None).at(path)? {
            LoadedSample::Events(e) => Ok(e),
            LoadedSample::Labeled(s) => Ok(s.events),
        }
    }
}

/// Writes samples as `<subdir>/<sample_id>.csv` plus the class list.
pub fn write_dataset(run: &mut Run, subdir: &str, samples: &[LabeledSample]) -> Result<(), Failure> {
    let Some(first) = samples.first() else {
        return Ok(());
    };
    let meta = DatasetMeta {
        class_names: first.class_names().to_vec(),
    };
    let text = toml::to_string(&meta).map_err(|e| Failure::data(e.to_string()))?;
    run.write(&format!("{subdir}/{DATASET_FILE}"), text.as_bytes())?;
    for s in samples {
        let mut buf = Vec::new();
        write_csv_sample(&mut buf, &s.events, Some(s.labels()))?;
        run.write(&format!("{subdir}/{}.csv", s.sample_id()), &buf)?;
    }
    Ok(())
}
