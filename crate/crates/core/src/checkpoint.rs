//! Binary checkpoint of a trained model.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic `GATENET\0`                         |
//! | 4                | format version (u32)                      |
//! | 8                | header length `h` (u64)                   |
//! | h                | UTF-8 JSON header                         |
//! | rest             | f64 values, little-endian, in header order |
//!
//! The header holds the model configuration, marker panel, class names, fitted
//! transform and a directory of tensors (name, shape, offset in values). Running
//! batchnorm statistics are stored as tensors `running.{i}.mean` / `running.{i}.var`.
//! No timestamps or paths are written, so equal models give equal bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cyto::{FittedTransform, MarkerPanel};
use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::kernels::RunningStats;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::TrainedModel;

pub const MAGIC: &[u8; 8] = b"GATENET\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    markers: Vec<String>,
    class_names: Vec<String>,
    transform: FittedTransform,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(trained: &TrainedModel) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut push = |name: String, t: &Tensor| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: values.len(),
        });
        values.extend_from_slice(t.data());
    };
    for p in trained.model.params.iter() {
        push(p.name.clone(), &p.value);
    }
    for (i, r) in trained.model.running.iter().enumerate() {
        push(format!("running.{i}.mean"), &Tensor::vector(r.mean.clone()));
        push(format!("running.{i}.var"), &Tensor::vector(r.var.clone()));
    }
    let header = Header {
        model: trained.model.config().clone(),
        markers: trained.panel.names().to_vec(),
        class_names: trained.class_names.clone(),
        transform: trained.transform.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Validation(format!("checkpoint: {}", detail.into()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a GateNet checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let h = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.checked_add(h).ok_or_else(|| corrupt("header length overflows"))?)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[20 + h..];
    if data.len() % 8 != 0 {
        return Err(corrupt("value section is not a whole number of f64"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let take = |e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past the end", e.name)))?;
        Tensor::new(e.shape.clone(), slice.to_vec())
    };
    let mut params = ParamSet::new();
    let mut running: Vec<RunningStats> = Vec::new();
    let mut pending_mean: Option<Vec<f64>> = None;
    for e in &header.tensors {
        if let Some(rest) = e.name.strip_prefix("running.") {
            let t = take(e)?.into_data();
            if rest.ends_with(".mean") {
                pending_mean = Some(t);
            } else {
                let mean = pending_mean.take().ok_or_else(|| corrupt("running variance without mean"))?;
                running.push(RunningStats { mean, var: t });
            }
        } else {
            params.add(e.name.clone(), take(e)?);
        }
    }
    let model = Model::from_parts(header.model, params, running)?;
    let panel = MarkerPanel::new(header.markers)?;
    if panel.n_markers() != model.config().n_markers() || header.class_names.len() != model.config().n_classes() {
        return Err(corrupt("panel or class names do not match the model"));
    }
    Ok(TrainedModel {
        model,
        panel,
        class_names: header.class_names,
        transform: header.transform,
    })
}

pub fn save(trained: &TrainedModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(trained)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
