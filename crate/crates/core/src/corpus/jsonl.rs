//! Canonical JSONL corpora: one object per line with an explicit `split`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{clean_text, Case, CaseSet, LabeledDoc, LabeledDocSet, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: String,
    text: String,
    labels: Vec<String>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct CaseRecord {
    id: String,
    body: String,
    catchphrases: Vec<String>,
    split: Split,
}

/// Parses non-blank lines into records, reporting the 1-based line number of
/// the first malformed one.
fn read_records<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, R)>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Malformed {
            file: path.to_path_buf(),
            record: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub(super) fn read_classification_jsonl(path: &Path) -> Result<LabeledDocSet> {
    let mut splits: [Vec<LabeledDoc>; 3] = Default::default();
    for (line, rec) in read_records::<DocRecord>(path)? {
        let text = clean_text(&rec.text);
        if text.is_empty() {
            return Err(Error::Malformed {
                file: path.to_path_buf(),
                record: line,
                message: "text is empty after cleaning".into(),
            });
        }
        splits[rec.split as usize].push(LabeledDoc {
            id: rec.id,
            text,
            labels: rec.labels.into_iter().collect::<BTreeSet<_>>(),
        });
    }
    let [train, dev, test] = splits;
    LabeledDocSet::from_splits(train, dev, test)
}

pub(super) fn read_case_jsonl(path: &Path) -> Result<CaseSet> {
    let mut splits: [Vec<Case>; 3] = Default::default();
    for (line, rec) in read_records::<CaseRecord>(path)? {
        let body = clean_text(&rec.body);
        let catchphrases: Vec<String> = rec
            .catchphrases
            .iter()
            .map(|c| clean_text(c))
            .filter(|c| !c.is_empty())
            .collect();
        if body.is_empty() || catchphrases.is_empty() {
            return Err(Error::Malformed {
                file: path.to_path_buf(),
                record: line,
                message: "case needs a non-empty body and at least one catchphrase".into(),
            });
        }
        splits[rec.split as usize].push(Case {
            id: rec.id,
            body,
            catchphrases,
        });
    }
    let [train, dev, test] = splits;
    CaseSet::from_splits(train, dev, test)
}

fn write_lines<I: Serialize>(path: &Path, records: impl Iterator<Item = I>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_classification_jsonl(set: &LabeledDocSet, path: &Path) -> Result<()> {
    let records = Split::ALL.into_iter().flat_map(|split| {
        set.split(split).iter().map(move |d| DocRecord {
            id: d.id.clone(),
            text: d.text.clone(),
            labels: d.labels.iter().cloned().collect(),
            split,
        })
    });
    write_lines(path, records)
}

pub fn write_case_jsonl(set: &CaseSet, path: &Path) -> Result<()> {
    let records = Split::ALL.into_iter().flat_map(|split| {
        set.split(split).iter().map(move |c| CaseRecord {
            id: c.id.clone(),
            body: c.body.clone(),
            catchphrases: c.catchphrases.clone(),
            split,
        })
    });
    write_lines(path, records)
}
