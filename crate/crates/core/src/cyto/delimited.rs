use std::io::{Read, Write};
use std::path::Path;

use crate::cyto::{EventTable, LabeledSample, MarkerPanel};
use crate::error::{Error, Result};

/// Which column carries integer class labels, and the classes they index.
#[derive(Debug, Clone)]
pub struct LabelColumn {
    pub column: String,
    pub class_names: Vec<String>,
}

impl LabelColumn {
    pub fn new(class_names: Vec<String>) -> Self {
        LabelColumn {
            column: "label".to_string(),
            class_names,
        }
    }
}

#[derive(Debug, Clone)]
pub enum LoadedSample {
    Events(EventTable),
    Labeled(LabeledSample),
}

fn sample_id_from(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads a comma-separated sample with a header row of marker names.
pub fn load_csv_sample(path: &Path, label: Option<&LabelColumn>) -> Result<LoadedSample> {
    let file = std::fs::File::open(path)?;
    let id = sample_id_from(path);
    match label {
        Some(l) => read_csv_labeled(file, &id, l).map(LoadedSample::Labeled),
        None => read_csv_events(file, &id).map(LoadedSample::Events),
    }
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_raw<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // data rows are numbered from 1, after the header
        let row_no = i + 1;
        let mut row = Vec::with_capacity(header.len());
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: row_no,
                column: j + 1,
                detail: format!("`{cell}` is not a number (column `{}`)", header[j]),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(RawTable { header, rows })
}

pub fn read_csv_events<R: Read>(reader: R, sample_id: &str) -> Result<EventTable> {
    let raw = read_raw(reader)?;
    let panel = MarkerPanel::new(raw.header)?;
    EventTable::new(panel, raw.rows.concat(), sample_id)
}

pub fn read_csv_labeled<R: Read>(reader: R, sample_id: &str, label: &LabelColumn) -> Result<LabeledSample> {
    let raw = read_raw(reader)?;
    let Some(lcol) = raw.header.iter().position(|h| *h == label.column) else {
        return Err(Error::Validation(format!(
            "sample `{sample_id}` has no label column `{}`",
            label.column
        )));
    };
    let markers: Vec<String> = raw
        .header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != lcol)
        .map(|(_, h)| h.clone())
        .collect();
    let panel = MarkerPanel::new(markers)?;
    let mut values = Vec::with_capacity(raw.rows.len() * panel.n_markers());
    let mut labels = Vec::with_capacity(raw.rows.len());
    for (i, row) in raw.rows.iter().enumerate() {
        let l = row[lcol];
        if l < 0.0 || l.fract() != 0.0 {
            return Err(Error::Parse {
                row: i + 1,
                column: lcol + 1,
                detail: format!("label `{l}` is not a non-negative integer"),
            });
        }
        let l = l as usize;
        if l >= label.class_names.len() {
            return Err(Error::Validation(format!(
                "sample `{sample_id}`, row {}: label {l} >= {} declared classes",
                i + 1,
                label.class_names.len()
            )));
        }
        labels.push(l);
        values.extend(row.iter().enumerate().filter(|&(j, _)| j != lcol).map(|(_, v)| *v));
    }
    let events = EventTable::new(panel, values, sample_id)?;
    LabeledSample::new(events, labels, label.class_names.clone())
}

/// Writes events (and labels, if any) in the same format the readers accept.
///
/// `f64` values are printed in shortest round-trip form, so reading the file back
/// reproduces every intensity exactly.
pub fn write_csv_sample<W: Write>(writer: W, events: &EventTable, labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = events.panel().names().to_vec();
    if labels.is_some() {
        header.push("label".to_string());
    }
    w.write_record(&header)?;
    for i in 0..events.n_events() {
        let mut rec: Vec<String> = events.event(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
