use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{ratio_slug, ExperimentConfig, Init, InitKind, Task};
use super::table::{build_table, AdapterResults, Layout, ModelResults, Results, ResultsTable, SliceResults};
use crate::corpus::{
    clean_text, load_case_dataset, load_classification_dataset, slice_len, subsample_train, CaseSet, LabeledDocSet,
};
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{init_model, trainable_parameters, EncoderModel, Precision, Scalar, TrainMode};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::tasks::{
    derive_seed, evaluate_classifier, evaluate_retriever, generate_synthetic, load_base_weights, run_dapt,
    train_classifier, train_retriever, with_adapters, MlmModel,
};
use crate::tokenizer::{train_vocab, Vocab};
use crate::training::{TrainConfig, TrainReport};

const ENCODER_TAG: u64 = 0xe5c0;
const REPORT_FILE: &str = "report.json";
const WALL_TIME_FILE: &str = "wall_time_secs.txt";
const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// What one grid cell (or one pre-training run) produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub cell: String,
    pub seed: u64,
    pub n_train: usize,
    /// Held-out test metrics (dev when the test split is empty).
    pub metrics: MetricsReport,
    pub dev_metrics: MetricsReport,
    pub trainable_fraction: f64,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub root: PathBuf,
    pub results: Option<Results>,
    pub layout: Option<Layout>,
    pub table_path: Option<PathBuf>,
    pub table_text: Option<String>,
    /// Cells trained in this invocation.
    pub trained: usize,
    /// Cells whose report already existed.
    pub skipped: usize,
}

impl RunOutcome {
    pub fn table(&self) -> Result<Option<ResultsTable>> {
        match (&self.results, self.layout) {
            (Some(r), Some(l)) => build_table(r, l).map(Some),
            _ => Ok(None),
        }
    }
}

pub fn layout_for(task: Task) -> Option<Layout> {
    match task {
        Task::Dapt => None,
        Task::Classify => Some(Layout::Classification),
        Task::Retrieve => Some(Layout::Retrieval),
        Task::Ablation => Some(Layout::Ablation),
        Task::AdapterCompare => Some(Layout::AdapterDiff),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct Data {
    vocab: Vocab,
    domain: Vec<String>,
    domain_eval: Vec<String>,
    classification: Option<LabeledDocSet>,
    cases: Option<CaseSet>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(clean_text).filter(|l| !l.is_empty()).collect())
}

/// Holds out the last tenth (at least one document) for perplexity.
fn split_domain(mut docs: Vec<String>) -> Result<(Vec<String>, Vec<String>)> {
    if docs.len() < 2 {
        return Err(Error::Config("domain corpus needs at least two documents".into()));
    }
    let held = (docs.len() / 10).max(1);
    let eval = docs.split_off(docs.len() - held);
    Ok((docs, eval))
}

fn load_data(cfg: &ExperimentConfig, root: &Path) -> Result<Data> {
    let (domain, classification, cases) = match &cfg.data.synthetic {
        Some(spec) => {
            let d = generate_synthetic(spec)?;
            (d.domain_corpus, Some(d.classification), Some(d.cases))
        }
        None => {
            let cls = cfg
                .data
                .classification
                .as_ref()
                .map(|r| load_classification_dataset(&r.path, r.format))
                .transpose()?;
            let cases = cfg
                .data
                .cases
                .as_ref()
                .map(|r| load_case_dataset(&r.path, r.format, cfg.data.split_seed).map(|(s, _)| s))
                .transpose()?;
            let domain = cfg
                .data
                .domain_corpus
                .as_deref()
                .map(read_lines)
                .transpose()?
                .unwrap_or_default();
            (domain, cls, cases)
        }
    };
    let (domain, domain_eval) = if cfg.needs_dapt() {
        split_domain(domain)?
    } else {
        (domain, Vec::new())
    };

    let vocab_path = root.join("vocab.txt");
    let vocab = if let Some(p) = &cfg.tokenizer.vocab {
        Vocab::load(p)?
    } else if vocab_path.exists() {
        Vocab::load(&vocab_path)?
    } else {
        let mut texts: Vec<&str> = domain.iter().map(String::as_str).collect();
        if let Some(c) = &classification {
            texts.extend(c.train.iter().map(|d| d.text.as_str()));
        }
        if let Some(c) = &cases {
            texts.extend(c.train.iter().map(|c| c.body.as_str()));
            texts.extend(c.train.iter().flat_map(|c| c.catchphrases.iter().map(String::as_str)));
        }
        let v = train_vocab(texts, cfg.encoder.vocab_size, cfg.tokenizer.seed)?;
        v.save(&vocab_path)?;
        v
    };
    if vocab.len() > cfg.encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but encoder.vocab_size is {}",
            vocab.len(),
            cfg.encoder.vocab_size
        )));
    }
    Ok(Data {
        vocab,
        domain,
        domain_eval,
        classification,
        cases,
    })
}

/// Data-dependent checks that must pass before any training starts.
fn check_data(cfg: &ExperimentConfig, data: &Data) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    match cfg.task {
        Task::Classify | Task::Ablation | Task::AdapterCompare => {
            let set = data.classification.as_ref().expect("validated");
            if set.train.is_empty() || set.dev.is_empty() {
                return bad("classification data needs non-empty train and dev splits".into());
            }
            if cfg.task == Task::Ablation {
                if let Some(r) = cfg.ratios.iter().find(|&&r| slice_len(r, set.train.len()) == 0) {
                    return bad(format!(
                        "ratio {r} leaves no training documents out of {}",
                        set.train.len()
                    ));
                }
            }
        }
        Task::Retrieve => {
            let set = data.cases.as_ref().expect("validated");
            if set.train.is_empty() || set.dev.is_empty() {
                return bad("case data needs non-empty train and dev splits".into());
            }
        }
        Task::Dapt => {}
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Counts {
    trained: usize,
    skipped: usize,
}

impl Counts {
    fn existing(&mut self, dir: &Path) -> Result<Option<RunReport>> {
        let report_path = dir.join(REPORT_FILE);
        if !report_path.exists() {
            return Ok(None);
        }
        self.skipped += 1;
        read_json(&report_path).map(Some)
    }

    /// Runs `work` in `dir` unless a report is already there.
    fn cell(&mut self, dir: &Path, work: impl FnOnce(&Path) -> Result<RunReport>) -> Result<RunReport> {
        if let Some(r) = self.existing(dir)? {
            return Ok(r);
        }
        create_dir(dir)?;
        let started = Instant::now();
        let report = work(dir)?;
        let secs = started.elapsed().as_secs_f64();
        let wall = dir.join(WALL_TIME_FILE);
        std::fs::write(&wall, format!("{secs:.3}\n")).map_err(|e| Error::io(&wall, e))?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        self.trained += 1;
        Ok(report)
    }
}

struct Runner<'a, T> {
    cfg: &'a ExperimentConfig,
    root: PathBuf,
    data: Data,
    counts: Counts,
    pretrained: BTreeMap<u64, Checkpoint<T>>,
}

impl<T: Scalar> Runner<'_, T> {
    fn horizon(cfg: &TrainConfig, seed: u64, examples: usize) -> TrainConfig {
        let mut c = cfg.clone();
        c.seed = seed;
        c.total_steps = c
            .total_steps
            .min(TrainConfig::steps_for(c.epochs, examples, c.batch_size))
            .max(1);
        c
    }

    fn seed_dir(&self, parts: &[&str], seed: u64) -> PathBuf {
        let mut p = self.root.clone();
        for part in parts {
            p.push(part);
        }
        p.join(format!("seed-{seed}"))
    }

    fn check_vocab(&self, ckpt: &Checkpoint<T>, source: &Path) -> Result<()> {
        if ckpt.vocab != self.data.vocab.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different vocabulary",
                source.display()
            )));
        }
        Ok(())
    }

    fn pretrained(&mut self, seed: u64) -> Result<&Checkpoint<T>> {
        if !self.pretrained.contains_key(&seed) {
            let ckpt = self.pretrain(seed)?;
            self.pretrained.insert(seed, ckpt);
        }
        Ok(&self.pretrained[&seed])
    }

    fn pretrain(&mut self, seed: u64) -> Result<Checkpoint<T>> {
        let dir = self.seed_dir(&["pretrain"], seed);
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let cfg = self.cfg;
        let data = &self.data;
        self.counts.cell(&dir, |dir| {
            let encoder = init_model::<T>(&cfg.encoder, derive_seed(seed, ENCODER_TAG))?;
            let model = MlmModel::new(encoder, cfg.dapt.tied);
            let tc = Self::horizon(&cfg.pretrain, seed, data.domain.len());
            let (model, report) = run_dapt(model, &data.vocab, &data.domain, &data.domain_eval, &tc, &cfg.dapt)?;
            model
                .checkpoint(&data.vocab, report.steps as u64)
                .save(&dir.join(CHECKPOINT_FILE))?;
            Ok(RunReport {
                task: Task::Dapt,
                cell: "pretrain".into(),
                seed,
                n_train: data.domain.len(),
                metrics: MetricsReport::default(),
                dev_metrics: MetricsReport::default(),
                trainable_fraction: 1.0,
                train: report.downsampled(),
            })
        })?;
        let ckpt = Checkpoint::load(&ckpt_path)?;
        self.check_vocab(&ckpt, &ckpt_path)?;
        Ok(ckpt)
    }

    fn encoder(&mut self, init: &Init, seed: u64, mode: TrainMode) -> Result<EncoderModel<T>> {
        let mut enc = init_model::<T>(&self.cfg.encoder, derive_seed(seed, ENCODER_TAG))?;
        match init {
            Init::Builtin(InitKind::Random) => {}
            Init::Builtin(InitKind::Dapt) => {
                load_base_weights(&mut enc, self.pretrained(seed)?)?;
            }
            Init::Checkpoint { checkpoint, .. } => {
                let ckpt = Checkpoint::<T>::load(checkpoint)?;
                self.check_vocab(&ckpt, checkpoint)?;
                load_base_weights(&mut enc, &ckpt)?;
            }
        }
        let adapter = if mode == TrainMode::AdapterOnly {
            self.cfg.adapter
        } else {
            None
        };
        with_adapters(enc, adapter)
    }

    fn classify_cell(
        &mut self,
        dir: &Path,
        set: &LabeledDocSet,
        init: &Init,
        seed: u64,
        mode: TrainMode,
    ) -> Result<RunReport> {
        if let Some(r) = self.counts.existing(dir)? {
            return Ok(r);
        }
        let encoder = self.encoder(init, seed, mode)?;
        let cfg = self.cfg;
        let vocab = &self.data.vocab;
        let task = cfg.task;
        let cell = dir
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.counts.cell(dir, |dir| {
            let tc = Self::horizon(&cfg.train, seed, set.train.len());
            let (model, report) = train_classifier(encoder, vocab, set, &tc, mode)?;
            let eval =
                |docs| evaluate_classifier(&model, vocab, docs, cfg.threshold, cfg.top_k, None).map(|e| e.report);
            let dev_metrics = eval(&set.dev)?;
            let metrics = if set.test.is_empty() {
                dev_metrics.clone()
            } else {
                eval(&set.test)?
            };
            let fraction = trainable_parameters(&model.encoder, mode)?.trainable_fraction(model.encoder.params());
            model
                .checkpoint(vocab, report.steps as u64)
                .save(&dir.join(CHECKPOINT_FILE))?;
            Ok(RunReport {
                task,
                cell,
                seed,
                n_train: set.train.len(),
                metrics,
                dev_metrics,
                trainable_fraction: fraction,
                train: report.downsampled(),
            })
        })
    }

    fn retrieve_cell(&mut self, dir: &Path, init: &Init, seed: u64) -> Result<RunReport> {
        if let Some(r) = self.counts.existing(dir)? {
            return Ok(r);
        }
        let encoder = self.encoder(init, seed, TrainMode::Full)?;
        let cfg = self.cfg;
        let vocab = &self.data.vocab;
        let set = self.data.cases.as_ref().expect("validated");
        self.counts.cell(dir, |dir| {
            let tc = Self::horizon(&cfg.train, seed, set.train.len());
            let (model, report) = train_retriever(encoder, vocab, set, &tc, &cfg.retrieval)?;
            let dev_metrics = evaluate_retriever(&model, vocab, &set.dev)?.stats.report();
            let metrics = if set.test.is_empty() {
                dev_metrics.clone()
            } else {
                evaluate_retriever(&model, vocab, &set.test)?.stats.report()
            };
            model
                .checkpoint(vocab, report.steps as u64)
                .save(&dir.join(CHECKPOINT_FILE))?;
            let fraction = if cfg.retrieval.freeze_encoder {
                let p = model.encoder.params();
                let head: usize = p
                    .iter()
                    .filter(|x| x.group == crate::encoder::ParamGroup::Head)
                    .map(|x| x.value.len())
                    .sum();
                head as f64 / p.iter().map(|x| x.value.len()).sum::<usize>() as f64
            } else {
                1.0
            };
            Ok(RunReport {
                task: Task::Retrieve,
                cell: init.slug(),
                seed,
                n_train: set.train.len(),
                metrics,
                dev_metrics,
                trainable_fraction: fraction,
                train: report.downsampled(),
            })
        })
    }

    fn model_name(&self, init: &Init, mode: TrainMode) -> String {
        match mode {
            TrainMode::Full => init.label(),
            TrainMode::AdapterOnly => format!("{} (adapter)", init.label()),
        }
    }

    fn mode_slug(mode: TrainMode) -> &'static str {
        match mode {
            TrainMode::Full => "full",
            TrainMode::AdapterOnly => "adapter-only",
        }
    }

    fn run(&mut self) -> Result<Option<Results>> {
        let cfg = self.cfg;
        let seeds = cfg.seeds.clone();
        match cfg.task {
            Task::Dapt => {
                for &s in &seeds {
                    self.pretrain(s)?;
                }
                Ok(None)
            }
            Task::Classify => {
                let set = self.data.classification.clone().expect("validated");
                let mut models = Vec::new();
                for init in &cfg.inits {
                    let cell = format!("{}-{}", init.slug(), Self::mode_slug(cfg.mode));
                    let mut runs = Vec::new();
                    for &s in &seeds {
                        let dir = self.seed_dir(&["runs", &cell], s);
                        runs.push(self.classify_cell(&dir, &set, init, s, cfg.mode)?.metrics);
                    }
                    models.push(ModelResults {
                        name: self.model_name(init, cfg.mode),
                        runs,
                    });
                }
                Ok(Some(Results::Models(models)))
            }
            Task::Retrieve => {
                let mut models = Vec::new();
                for init in &cfg.inits {
                    let mut runs = Vec::new();
                    for &s in &seeds {
                        let dir = self.seed_dir(&["runs", &init.slug()], s);
                        runs.push(self.retrieve_cell(&dir, init, s)?.metrics);
                    }
                    models.push(ModelResults {
                        name: init.label(),
                        runs,
                    });
                }
                Ok(Some(Results::Models(models)))
            }
            Task::Ablation => {
                let full = self.data.classification.clone().expect("validated");
                let (base_init, adapted_init) = (&cfg.inits[0], &cfg.inits[1]);
                let mut slices = Vec::new();
                for &ratio in &cfg.ratios {
                    let mut base_runs = Vec::new();
                    let mut adapted_runs = Vec::new();
                    let mut n_train = 0;
                    for &s in &seeds {
                        let set = subsample_train(&full, ratio, s)?;
                        n_train = set.train.len();
                        for (init, runs) in [(base_init, &mut base_runs), (adapted_init, &mut adapted_runs)] {
                            let cell = format!("{}-{}", ratio_slug(ratio), init.slug());
                            let dir = self.seed_dir(&["runs", &cell], s);
                            runs.push(self.classify_cell(&dir, &set, init, s, cfg.mode)?.metrics);
                        }
                    }
                    slices.push(SliceResults {
                        ratio,
                        n_train,
                        baseline: ModelResults {
                            name: self.model_name(base_init, cfg.mode),
                            runs: base_runs,
                        },
                        adapted: ModelResults {
                            name: self.model_name(adapted_init, cfg.mode),
                            runs: adapted_runs,
                        },
                    });
                }
                Ok(Some(Results::Slices(slices)))
            }
            Task::AdapterCompare => {
                let set = self.data.classification.clone().expect("validated");
                let mut pairs = Vec::new();
                for init in &cfg.inits {
                    let mut by_mode = Vec::new();
                    for mode in [TrainMode::Full, TrainMode::AdapterOnly] {
                        let cell = format!("{}-{}", init.slug(), Self::mode_slug(mode));
                        let mut runs = Vec::new();
                        for &s in &seeds {
                            let dir = self.seed_dir(&["runs", &cell], s);
                            runs.push(self.classify_cell(&dir, &set, init, s, mode)?.metrics);
                        }
                        by_mode.push(ModelResults {
                            name: self.model_name(init, mode),
                            runs,
                        });
                    }
                    let adapter = by_mode.pop().expect("two modes");
                    let full = by_mode.pop().expect("two modes");
                    pairs.push(AdapterResults { full, adapter });
                }
                Ok(Some(Results::AdapterPairs(pairs)))
            }
        }
    }
}

fn run_with<T: Scalar>(cfg: &ExperimentConfig, root: PathBuf) -> Result<RunOutcome> {
    let data = load_data(cfg, &root)?;
    check_data(cfg, &data)?;
    let mut runner = Runner::<T> {
        cfg,
        root: root.clone(),
        data,
        counts: Counts::default(),
        pretrained: BTreeMap::new(),
    };
    let results = runner.run()?;
    let layout = layout_for(cfg.task);
    let (mut table_path, mut table_text) = (None, None);
    if let (Some(results), Some(layout)) = (&results, layout) {
        write_json(&root.join("results.json"), results)?;
        let path = root.join(format!("{}.{}", layout.name(), cfg.format.extension()));
        let text = build_table(results, layout)?.render(cfg.format)?;
        write_atomic(&path, text.as_bytes())?;
        table_path = Some(path);
        table_text = Some(text);
    }
    Ok(RunOutcome {
        root,
        results,
        layout,
        table_path,
        table_text,
        trained: runner.counts.trained,
        skipped: runner.counts.skipped,
    })
}

/// Validates `cfg`, then runs (or resumes) every cell of the experiment
/// under `<output_dir>/<task>-<hash>`, writing per-cell reports and the
/// task's results table.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let root = cfg.run_root()?;
    create_dir(&root)?;
    write_atomic(&root.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    match cfg.train.precision {
        Precision::F32 => run_with::<f32>(cfg, root),
        Precision::F64 => run_with::<f64>(cfg, root),
    }
}

/// Runs `cfg` with `n` consecutive seeds starting at its first seed and
/// returns the aggregated table (mean with population std rows).
pub fn seed_sweep(cfg: &ExperimentConfig, n: usize) -> Result<(ResultsTable, RunOutcome)> {
    if n == 0 {
        return Err(Error::invalid("seed_sweep needs at least one seed"));
    }
    let first = cfg.seeds.first().copied().unwrap_or(0);
    let mut c = cfg.clone();
    c.seeds = (0..n as u64).map(|i| first + i).collect();
    let outcome = run_experiment(&c)?;
    let table = outcome
        .table()?
        .ok_or_else(|| Error::Config(format!("task {} has no results table", c.task.as_str())))?;
    Ok((table, outcome))
}
