//! Canonical classification and retrieval corpora: loading, cleaning,
//! label-frequency buckets and nested training-size slices.

mod aus;
mod eurlex;
mod jsonl;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use jsonl::{write_case_jsonl, write_classification_jsonl};

/// Labels with strictly more training documents than this are "frequent".
pub const FREQUENT_THRESHOLD: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" | "valid" | "validation" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDoc {
    pub id: String,
    pub text: String,
    pub labels: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDocSet {
    pub train: Vec<LabeledDoc>,
    pub dev: Vec<LabeledDoc>,
    pub test: Vec<LabeledDoc>,
    pub label_universe: BTreeSet<String>,
}

impl LabeledDocSet {
    /// Builds a set from its splits, computing the label universe from every
    /// split and checking the id/label invariants.
    pub fn from_splits(train: Vec<LabeledDoc>, dev: Vec<LabeledDoc>, test: Vec<LabeledDoc>) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in train.iter().chain(&dev).chain(&test) {
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
            if doc.text.is_empty() {
                return Err(Error::invalid(format!("document `{}` has empty text", doc.id)));
            }
        }
        if let Some(doc) = train.iter().find(|d| d.labels.is_empty()) {
            return Err(Error::invalid(format!("training document `{}` has no labels", doc.id)));
        }
        let label_universe = train
            .iter()
            .chain(&dev)
            .chain(&test)
            .flat_map(|d| d.labels.iter().cloned())
            .collect();
        Ok(LabeledDocSet {
            train,
            dev,
            test,
            label_universe,
        })
    }

    pub fn split(&self, split: Split) -> &[LabeledDoc] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Label universe in sorted order; a label's position is its output index
    /// in a classifier head.
    pub fn label_index(&self) -> Vec<String> {
        self.label_universe.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub body: String,
    pub catchphrases: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSet {
    pub train: Vec<Case>,
    pub dev: Vec<Case>,
    pub test: Vec<Case>,
}

impl CaseSet {
    pub fn from_splits(train: Vec<Case>, dev: Vec<Case>, test: Vec<Case>) -> Result<Self> {
        let mut seen = HashSet::new();
        for case in train.iter().chain(&dev).chain(&test) {
            if !seen.insert(case.id.as_str()) {
                return Err(Error::DuplicateId(case.id.clone()));
            }
            if case.body.is_empty() {
                return Err(Error::invalid(format!("case `{}` has an empty body", case.id)));
            }
            if case.catchphrases.is_empty() {
                return Err(Error::invalid(format!("case `{}` has no catchphrases", case.id)));
            }
        }
        Ok(CaseSet { train, dev, test })
    }

    pub fn split(&self, split: Split) -> &[Case] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassificationFormat {
    CanonicalJsonl,
    EurlexJsonDir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseFormat {
    CanonicalJsonl,
    AusXmlDir,
}

/// What a case loader dropped along the way.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseLoadReport {
    pub loaded: usize,
    /// Cases whose source had no catchphrase (or no sentence) elements.
    pub skipped_unannotated: Vec<String>,
    /// Files that failed to parse, with the parser's message.
    pub unparseable: Vec<(PathBuf, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBuckets {
    pub frequent: BTreeSet<String>,
    pub few_shot: BTreeSet<String>,
    pub zero_shot: BTreeSet<String>,
    pub counts: BTreeMap<String, usize>,
}

impl LabelBuckets {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.frequent.len(), self.few_shot.len(), self.zero_shot.len())
    }
}

/// NFC-normalizes, drops control characters, collapses whitespace runs to a
/// single space and trims.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    let visible = raw.chars().filter(|c| c.is_whitespace() || !c.is_control());
    for c in visible.nfc() {
        if c.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

pub fn load_classification_dataset(path: &Path, format: ClassificationFormat) -> Result<LabeledDocSet> {
    match format {
        ClassificationFormat::CanonicalJsonl => jsonl::read_classification_jsonl(path),
        ClassificationFormat::EurlexJsonDir => eurlex::read_eurlex_dir(path),
    }
}

/// Loads a case corpus. Sources without split information are split 80/10/10
/// by a shuffle seeded with `split_seed`.
pub fn load_case_dataset(path: &Path, format: CaseFormat, split_seed: u64) -> Result<(CaseSet, CaseLoadReport)> {
    match format {
        CaseFormat::CanonicalJsonl => {
            let set = jsonl::read_case_jsonl(path)?;
            let report = CaseLoadReport {
                loaded: set.len(),
                ..Default::default()
            };
            Ok((set, report))
        }
        CaseFormat::AusXmlDir => {
            let (cases, mut report) = aus::read_aus_dir(path)?;
            report.loaded = cases.len();
            Ok((split_cases(cases, split_seed)?, report))
        }
    }
}

/// Seeded 80/10/10 split: dev and test each take floor(n/10) cases, train the
/// rest. Input order does not matter; cases are sorted by id first.
pub fn split_cases(mut cases: Vec<Case>, seed: u64) -> Result<CaseSet> {
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases.shuffle(&mut rng);
    let n_held = cases.len() / 10;
    let test = cases.split_off(cases.len() - n_held);
    let dev = cases.split_off(cases.len() - n_held);
    CaseSet::from_splits(cases, dev, test)
}

/// Buckets every label by its number of training documents: frequent (> 50),
/// few-shot (1..=50) and zero-shot (0).
pub fn partition_labels(set: &LabeledDocSet) -> Result<LabelBuckets> {
    if set.label_universe.is_empty() {
        return Err(Error::invalid("label universe is empty"));
    }
    let mut counts: BTreeMap<String, usize> = set.label_universe.iter().map(|l| (l.clone(), 0)).collect();
    for doc in &set.train {
        for label in &doc.labels {
            *counts.entry(label.clone()).or_default() += 1;
        }
    }
    let mut buckets = LabelBuckets {
        frequent: BTreeSet::new(),
        few_shot: BTreeSet::new(),
        zero_shot: BTreeSet::new(),
        counts: BTreeMap::new(),
    };
    for (label, &count) in &counts {
        let bucket = match count {
            0 => &mut buckets.zero_shot,
            c if c > FREQUENT_THRESHOLD => &mut buckets.frequent,
            _ => &mut buckets.few_shot,
        };
        bucket.insert(label.clone());
    }
    buckets.counts = counts;
    Ok(buckets)
}

/// Number of training documents kept by `subsample_train` for a given ratio.
pub fn slice_len(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Replaces the training split by the first `floor(ratio * n)` documents of a
/// permutation seeded by `seed`. Slices taken with the same seed are nested.
pub fn subsample_train(set: &LabeledDocSet, ratio: f64, seed: u64) -> Result<LabeledDocSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio must be in (0, 1], got {ratio}")));
    }
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let keep = slice_len(ratio, set.train.len());
    let train = order[..keep].iter().map(|&i| set.train[i].clone()).collect();
    Ok(LabeledDocSet {
        train,
        dev: set.dev.clone(),
        test: set.test.clone(),
        label_universe: set.label_universe.clone(),
    })
}
