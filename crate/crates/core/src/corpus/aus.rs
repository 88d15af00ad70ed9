//! Tolerant reader for the Australian case-report XML corpus
//! (`<sentence>` and `<catchphrase>` elements, one case per file).
//!
//! The raw corpus has non-standard attribute syntax (`<catchphrase "id=c0">`)
//! and stray entities, so attributes are never parsed and entity failures
//! fall back to the raw text.

use std::fs;
use std::path::{Path, PathBuf};

use quick_xml::events::Event;
use quick_xml::Reader;

use super::{clean_text, Case, CaseLoadReport};
use crate::error::{Error, Result};

enum Parsed {
    Case(Case),
    Unannotated(String),
}

fn xml_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")))
        .collect();
    files.sort();
    Ok(files)
}

fn parse_case(id: String, xml: &str) -> std::result::Result<Parsed, String> {
    let mut reader = Reader::from_str(xml);
    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut sentences = Vec::new();
    let mut catchphrases = Vec::new();
    let mut current = String::new();

    loop {
        match reader.read_event() {
            Ok(Event::Start(e)) => {
                let name = e.name().as_ref().to_ascii_lowercase();
                if name == b"sentence" || name == b"catchphrase" {
                    current.clear();
                }
                stack.push(name);
            }
            Ok(Event::End(_)) => {
                let name = stack.pop().ok_or("unbalanced closing tag")?;
                let text = clean_text(&current);
                match name.as_slice() {
                    b"sentence" if !text.is_empty() => sentences.push(text),
                    b"catchphrase" if !text.is_empty() => catchphrases.push(text),
                    _ => {}
                }
                if name == b"sentence" || name == b"catchphrase" {
                    current.clear();
                }
            }
            Ok(Event::Text(t)) => {
                if matches!(stack.last().map(Vec::as_slice), Some(b"sentence" | b"catchphrase")) {
                    match t.unescape() {
                        Ok(s) => current.push_str(&s),
                        Err(_) => current.push_str(&String::from_utf8_lossy(&t)),
                    }
                }
            }
            Ok(Event::CData(t)) => {
                if matches!(stack.last().map(Vec::as_slice), Some(b"sentence" | b"catchphrase")) {
                    current.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Ok(Event::Eof) => break,
            Ok(_) => {}
            Err(e) => return Err(format!("XML error at byte {}: {e}", reader.error_position())),
        }
    }
    if let Some(open) = stack.last() {
        return Err(format!(
            "unexpected end of file inside <{}>",
            String::from_utf8_lossy(open)
        ));
    }
    if sentences.is_empty() || catchphrases.is_empty() {
        return Ok(Parsed::Unannotated(id));
    }
    Ok(Parsed::Case(Case {
        id,
        body: sentences.join(" "),
        catchphrases,
    }))
}

pub(super) fn read_aus_dir(dir: &Path) -> Result<(Vec<Case>, CaseLoadReport)> {
    let files = xml_files(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("{}: no .xml files", dir.display())));
    }
    let mut report = CaseLoadReport::default();
    let mut cases = Vec::new();
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        let text = String::from_utf8_lossy(&bytes);
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match parse_case(id, &text) {
            Ok(Parsed::Case(case)) => cases.push(case),
            Ok(Parsed::Unannotated(id)) => report.skipped_unannotated.push(id),
            Err(msg) => report.unparseable.push((file.clone(), msg)),
        }
    }
    if report.unparseable.len() == files.len() {
        let (file, message) = report.unparseable.swap_remove(0);
        return Err(Error::Malformed {
            file,
            record: 1,
            message,
        });
    }
    Ok((cases, report))
}
