use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CaseFormat, ClassificationFormat};
use crate::encoder::{AdapterConfig, EncoderConfig, TrainMode};
use crate::error::{Error, Result};
use crate::tasks::{DaptOptions, RetrievalOptions, SyntheticSpec};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Task {
    Dapt,
    Classify,
    Retrieve,
    Ablation,
    AdapterCompare,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Dapt => "dapt",
            Task::Classify => "classify",
            Task::Retrieve => "retrieve",
            Task::Ablation => "ablation",
            Task::AdapterCompare => "adapter-compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Markdown,
    Csv,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Markdown => "md",
            TableFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Dapt,
}

/// Where a fine-tuned encoder's base weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Init {
    Builtin(InitKind),
    Checkpoint { name: String, checkpoint: PathBuf },
}

impl Init {
    /// Row label used in results tables.
    pub fn label(&self) -> String {
        match self {
            Init::Builtin(InitKind::Random) => "Random init".into(),
            Init::Builtin(InitKind::Dapt) => "DAPT init".into(),
            Init::Checkpoint { name, .. } => name.clone(),
        }
    }

    /// Directory-safe name.
    pub fn slug(&self) -> String {
        match self {
            Init::Builtin(InitKind::Random) => "random".into(),
            Init::Builtin(InitKind::Dapt) => "dapt".into(),
            Init::Checkpoint { name, .. } => {
                let s: String = name
                    .chars()
                    .map(|c| {
                        if c.is_ascii_alphanumeric() || c == '-' {
                            c.to_ascii_lowercase()
                        } else {
                            '_'
                        }
                    })
                    .collect();
                format!("ckpt-{s}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef<F> {
    pub path: PathBuf,
    pub format: F,
}

/// Either a synthetic spec or on-disk datasets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub classification: Option<DatasetRef<ClassificationFormat>>,
    pub cases: Option<DatasetRef<CaseFormat>>,
    /// Plain text, one document per line.
    pub domain_corpus: Option<PathBuf>,
    /// Seed for splitting case corpora that ship without splits.
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Reuse an existing vocabulary instead of training one.
    pub vocab: Option<PathBuf>,
    pub seed: u64,
}

/// One experiment: a task, its data, model and optimisation settings, and
/// the seeds to run. Parsed from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub format: TableFormat,
    pub data: DataConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_inits")]
    pub inits: Vec<Init>,
    /// Fine-tuning settings. The learning-rate horizon is the smaller of
    /// `total_steps` and `epochs` passes over the training split.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub dapt: DaptOptions,
    #[serde(default)]
    pub retrieval: RetrievalOptions,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

/// Top-level keys that do not influence any computed number and are
/// therefore left out of the run hash. Seeds are encoded in the per-seed
/// directory names instead.
pub const UNHASHED_FIELDS: [&str; 3] = ["seeds", "output_dir", "format"];

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_mode() -> TrainMode {
    TrainMode::Full
}

fn default_inits() -> Vec<Init> {
    vec![Init::Builtin(InitKind::Random), Init::Builtin(InitKind::Dapt)]
}

fn default_pretrain() -> TrainConfig {
    TrainConfig::pretraining(1000)
}

fn default_ratios() -> Vec<f64> {
    vec![1.0, 0.2, 0.1, 0.05, 0.01]
}

fn default_threshold() -> f64 {
    0.5
}

fn default_top_k() -> usize {
    5
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative dataset paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = &mut self.data.classification {
            fix(&mut c.path);
        }
        if let Some(c) = &mut self.data.cases {
            fix(&mut c.path);
        }
        if let Some(p) = &mut self.data.domain_corpus {
            fix(p);
        }
        if let Some(p) = &mut self.tokenizer.vocab {
            fix(p);
        }
        for init in &mut self.inits {
            if let Init::Checkpoint { checkpoint, .. } = init {
                fix(checkpoint);
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without touching model code,
    /// including that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        self.encoder.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.train.precision != self.pretrain.precision {
            return bad("train and pretrain precision must match".into());
        }
        if !(0.0..1.0).contains(&self.dapt.mask_rate) || self.dapt.mask_rate == 0.0 {
            return bad("dapt.mask_rate must be in (0, 1)".into());
        }
        if self.retrieval.shared_dim == 0 || self.retrieval.phrase_max_len < 2 {
            return bad("retrieval.shared_dim must be positive and phrase_max_len at least 2".into());
        }
        if self.retrieval.margin.is_nan() || self.retrieval.margin <= 0.0 {
            return bad("retrieval.margin must be positive".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must be in [0, 1)".into());
        }
        if let Some(a) = self.adapter {
            if a.bottleneck_dim == 0 {
                return bad("adapter.bottleneck_dim must be positive".into());
            }
        }
        self.validate_data()?;
        self.validate_task()?;
        for p in self.referenced_paths() {
            if !p.exists() {
                return bad(format!("path {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<()> {
        let d = &self.data;
        let on_disk = d.classification.is_some() || d.cases.is_some() || d.domain_corpus.is_some();
        match (&d.synthetic, on_disk) {
            (Some(spec), false) => spec.validate(),
            (Some(_), true) => Err(Error::Config(
                "data: give either a synthetic spec or dataset paths, not both".into(),
            )),
            (None, _) => {
                let needs_cls = matches!(self.task, Task::Classify | Task::Ablation | Task::AdapterCompare);
                if needs_cls && d.classification.is_none() {
                    return Err(Error::Config(format!(
                        "task {} needs data.classification",
                        self.task.as_str()
                    )));
                }
                if self.task == Task::Retrieve && d.cases.is_none() {
                    return Err(Error::Config("task retrieve needs data.cases".into()));
                }
                if self.needs_dapt() && d.domain_corpus.is_none() {
                    return Err(Error::Config("DAPT needs data.domain_corpus".into()));
                }
                Ok(())
            }
        }
    }

    fn validate_task(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.inits.is_empty() {
            return bad("inits must not be empty");
        }
        let mut slugs: Vec<String> = self.inits.iter().map(Init::slug).collect();
        slugs.sort();
        slugs.dedup();
        if slugs.len() != self.inits.len() {
            return bad("inits must be distinct");
        }
        let adapters_needed = self.task == Task::AdapterCompare || self.mode == TrainMode::AdapterOnly;
        if adapters_needed && self.adapter.is_none() {
            return bad("adapter-only training needs an [adapter] section");
        }
        match self.task {
            Task::Ablation => {
                if self.inits.len() != 2 {
                    return bad("ablation compares exactly two inits: baseline then adapted");
                }
                if self.ratios.is_empty() {
                    return bad("ratios must not be empty");
                }
                if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
                    return Err(Error::Config(format!("ratio {r} is outside (0, 1]")));
                }
                let mut pct: Vec<String> = self.ratios.iter().map(|r| ratio_slug(*r)).collect();
                pct.sort();
                pct.dedup();
                if pct.len() != self.ratios.len() {
                    return bad("ratios must be distinct");
                }
            }
            Task::Retrieve if self.mode == TrainMode::AdapterOnly => {
                return bad("adapter-only mode applies to classification tasks");
            }
            _ => {}
        }
        Ok(())
    }

    /// True when some run initialises from a masked-LM pre-trained encoder
    /// built by this experiment.
    pub fn needs_dapt(&self) -> bool {
        self.task == Task::Dapt || self.inits.contains(&Init::Builtin(InitKind::Dapt))
    }

    fn referenced_paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        out.extend(self.data.classification.as_ref().map(|d| d.path.as_path()));
        out.extend(self.data.cases.as_ref().map(|d| d.path.as_path()));
        out.extend(self.data.domain_corpus.as_deref());
        out.extend(self.tokenizer.vocab.as_deref());
        for init in &self.inits {
            if let Init::Checkpoint { checkpoint, .. } = init {
                out.push(checkpoint);
            }
        }
        out
    }

    /// Canonical JSON of every field that influences results.
    pub fn hashed_value(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            for k in UNHASHED_FIELDS {
                obj.remove(k);
            }
        }
        Ok(v)
    }

    /// Hex SHA-256 of [`Self::hashed_value`].
    pub fn hash(&self) -> Result<String> {
        Ok(hash_value(&self.hashed_value()?))
    }

    /// `<output_dir>/<task>-<first 16 hash digits>`.
    pub fn run_root(&self) -> Result<PathBuf> {
        let h = self.hash()?;
        Ok(self.output_dir.join(format!("{}-{}", self.task.as_str(), &h[..16])))
    }
}

pub fn hash_value(v: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(v).expect("JSON values always serialize");
    hex::encode(Sha256::digest(bytes))
}

/// `1.0 -> "100"`, `0.05 -> "5"`, `0.125 -> "12.5"`.
pub fn ratio_percent(ratio: f64) -> String {
    let s = format!("{:.4}", ratio * 100.0);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub(crate) fn ratio_slug(ratio: f64) -> String {
    format!("ratio-{}", ratio_percent(ratio).replace('.', "_"))
}
