//! Line-delimited JSON prediction records.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Prediction;
use crate::error::{Result, TpsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted_class: usize,
    pub predicted_name: String,
    pub zero_shot_class: usize,
    pub pre_entropy: f64,
    pub post_entropy: f64,
    pub fallback: bool,
    pub selected_views: Vec<usize>,
}

impl PredictionRecord {
    pub fn new(p: &Prediction, class_names: &[String]) -> Self {
        PredictionRecord {
            sample_id: p.sample_id.clone(),
            predicted_class: p.predicted_class,
            predicted_name: class_names.get(p.predicted_class).cloned().unwrap_or_default(),
            zero_shot_class: p.zero_shot_class,
            pre_entropy: p.pre_entropy,
            post_entropy: p.post_entropy,
            fallback: p.fallback,
            selected_views: p.selected_views.clone(),
        }
    }
}

pub fn write_record<W: Write>(out: &mut W, record: &PredictionRecord, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *out, record).map_err(|source| TpsError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    out.write_all(b"\n").map_err(|e| TpsError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| TpsError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| TpsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TpsError::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}
