//! EURLEX57K layout: `<root>/{train,dev,test}/*.json`, one legislative act per
//! file with `concepts` as its label list.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{clean_text, LabeledDoc, LabeledDocSet, Split};
use crate::error::{Error, Result};

const TEXT_FIELDS: [&str; 5] = ["title", "header", "recitals", "main_body", "attachments"];

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn collect_text(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|v| collect_text(v, out)),
        _ => {}
    }
}

fn parse_doc(path: &Path, ordinal: usize) -> Result<LabeledDoc> {
    let malformed = |message: String| Error::Malformed {
        file: path.to_path_buf(),
        record: ordinal,
        message,
    };
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&raw).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".into()))?;
    let id = obj
        .get("celex_id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .ok_or_else(|| malformed("no document id".into()))?;
    let labels = obj
        .get("concepts")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing `concepts` array".into()))?
        .iter()
        .map(|c| match c {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            other => Err(malformed(format!("bad concept {other}"))),
        })
        .collect::<Result<_>>()?;
    let mut parts = Vec::new();
    for field in TEXT_FIELDS {
        if let Some(v) = obj.get(field) {
            collect_text(v, &mut parts);
        }
    }
    let text = clean_text(&parts.join(" "));
    if text.is_empty() {
        return Err(malformed("document has no text".into()));
    }
    Ok(LabeledDoc { id, text, labels })
}

pub(super) fn read_eurlex_dir(root: &Path) -> Result<LabeledDocSet> {
    if !root.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", root.display())));
    }
    let mut splits: [Vec<LabeledDoc>; 3] = Default::default();
    let mut found_any = false;
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let dir = entry.map_err(|e| Error::io(root, e))?.path();
        let Some(split) = dir.file_name().and_then(|n| n.to_str()).and_then(Split::parse) else {
            continue;
        };
        if !dir.is_dir() {
            continue;
        }
        found_any = true;
        for (i, file) in json_files(&dir)?.iter().enumerate() {
            splits[split as usize].push(parse_doc(file, i + 1)?);
        }
    }
    if !found_any {
        return Err(Error::invalid(format!(
            "{}: expected train/dev/test subdirectories",
            root.display()
        )));
    }
    for docs in &mut splits {
        docs.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let [train, dev, test] = splits;
    LabeledDocSet::from_splits(train, dev, test)
}
