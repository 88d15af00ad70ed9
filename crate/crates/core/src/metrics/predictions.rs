use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RankedPrediction;
use crate::error::{Error, Result};

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub ranked: Vec<String>,
    pub gold: Vec<String>,
}

impl PredictionRecord {
    pub fn to_ranked(&self) -> Result<RankedPrediction> {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.ranked.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::invalid(format!("{}: candidate {dup} ranked twice", self.id)));
        }
        Ok(RankedPrediction::new(
            self.ranked.clone(),
            self.gold.iter().cloned().collect(),
        ))
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            file: path.to_path_buf(),
            record: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
