//! Plain-text checkpoints: the configuration followed by every parameter
//! tensor with its shape.
//!
//! ```text
//! freqrec-checkpoint 1
//! items = 30
//! config dim = 64
//! ...
//! tensor embedding.item_table 31 64
//! 0 0 0 ... (row-major values)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::FreqRec;

const MAGIC: &str = "freqrec-checkpoint 1";

pub fn to_text(model: &FreqRec) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "items = {}", model.item_count()).unwrap();
    for line in model.config.to_text().lines() {
        writeln!(out, "config {line}").unwrap();
    }
    for (name, t) in model.param_names().iter().zip(model.tensors()) {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        writeln!(out, "tensor {name} {}", dims.join(" ")).unwrap();
        let values: Vec<String> = t.data().iter().map(ToString::to_string).collect();
        writeln!(out, "{}", values.join(" ")).unwrap();
    }
    out
}

pub fn save(model: &FreqRec, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FreqRec> {
    from_text(&std::fs::read_to_string(path)?)
}

/// Rebuilds a model, checking that every expected tensor is present exactly
/// once with the shape the configuration implies.
pub fn from_text(text: &str) -> Result<FreqRec> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(bad("missing checkpoint header".into()));
    }
    let items: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("items = "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("missing item count".into()))?;
    let mut config = ModelConfig::default();
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    while let Some(line) = lines.next() {
        if let Some(kv) = line.strip_prefix("config ") {
            config.apply_text(kv)?;
        } else if let Some(header) = line.strip_prefix("tensor ") {
            let mut parts = header.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("tensor without a name".into()))?;
            let shape: Vec<usize> = parts
                .map(|d| d.parse().map_err(|_| bad(format!("bad extent `{d}` for {name}"))))
                .collect::<Result<_>>()?;
            let values: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad(format!("no values for {name}")))?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad value `{v}` in {name}"))))
                .collect::<Result<_>>()?;
            if tensors.insert(name.to_string(), (shape, values)).is_some() {
                return Err(bad(format!("tensor {name} appears twice")));
            }
        } else if !line.trim().is_empty() {
            return Err(bad(format!("unexpected line `{line}`")));
        }
    }
    config.validate()?;
    let mut model = FreqRec::new(config, items)?;
    let names = model.param_names();
    for (name, t) in names.iter().zip(model.tensors_mut()) {
        let (shape, values) = tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if shape != t.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {shape:?}, model expects {:?}",
                t.shape()
            )));
        }
        if values.len() != t.len() {
            return Err(bad(format!(
                "tensor {name} lists {} values for shape {shape:?}",
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(&values);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}
