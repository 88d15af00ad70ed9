//! Acceptance suite. Each criterion prints one `PASS`, `FAIL` or `SKIP` line;
//! the process exits nonzero when any criterion fails.
//!
//! Positional arguments filter criteria by substring, e.g.
//! `cargo test --test acceptance -- gradient`. Setting `DAPT_BENCH_BLESS=1`
//! writes missing golden files instead of failing on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dapt_bench::cli::{
    build_table, read_json, run_experiment, ExperimentConfig, Layout, ModelResults, Results, RunReport, SliceResults,
};
use dapt_bench::corpus::{
    load_case_dataset, load_classification_dataset, partition_labels, CaseFormat, ClassificationFormat,
};
use dapt_bench::encoder::{
    init_model, insert_adapters, trainable_parameters, AdapterConfig, EncoderConfig, EncoderModel, Mode, ParamGroup,
    ParamKind, ParamStore, Pooling, TrainMode,
};
use dapt_bench::metrics::{
    improvement_table, ndcg_at_k, precision_at_k, prf1_micro, r_precision_at_k, rank_stats, recall_at_k, Metric,
    MetricsReport, RankedPrediction, SliceResult,
};
use dapt_bench::tasks::{
    derive_seed, generate_synthetic, perplexity, run_dapt, train_classifier, ClassifierModel, DaptOptions, MlmModel,
    RetrievalOptions, RetrieverModel, SyntheticSpec,
};
use dapt_bench::tokenizer::{encode, mask_for_mlm, train_vocab, TokenSeq, Vocab, MASK};
use dapt_bench::training::{finite_difference_check, TrainConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Skip(String),
}

type Outcome = Result<Verdict, String>;

struct Criterion {
    name: &'static str,
    run: fn() -> Outcome,
}

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> Ctx<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        name: "metric-oracles",
        run: metric_oracles,
    },
    Criterion {
        name: "improvement-fixture",
        run: improvement_fixture,
    },
    Criterion {
        name: "gradient-exactness",
        run: gradient_exactness,
    },
    Criterion {
        name: "adapter-invariants",
        run: adapter_invariants,
    },
    Criterion {
        name: "mlm-statistics",
        run: mlm_statistics,
    },
    Criterion {
        name: "desk-learning",
        run: desk_learning,
    },
    Criterion {
        name: "ablation-directionality",
        run: ablation_directionality,
    },
    Criterion {
        name: "determinism",
        run: determinism,
    },
    Criterion {
        name: "dataset-integration",
        run: dataset_integration,
    },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = CRITERIA
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())));
    let mut failed = 0usize;
    let mut ran = 0usize;
    for c in selected {
        ran += 1;
        let started = Instant::now();
        let outcome = panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(Verdict::Pass(d)) => ("PASS", d),
            Ok(Verdict::Skip(d)) => ("SKIP", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {:<24} [{secs:7.1}s] {detail}", c.name);
    }
    println!("acceptance: {ran} criteria, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with a golden file byte for byte.
fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    match fs::read_to_string(&path) {
        Ok(expected) => {
            ensure!(
                expected == actual,
                "{} differs from the golden file\n--- expected\n{expected}--- actual\n{actual}",
                name
            );
            Ok(())
        }
        Err(_) if std::env::var_os("DAPT_BENCH_BLESS").is_some() => {
            fs::create_dir_all(path.parent().expect("golden dir")).ctx("creating golden dir")?;
            fs::write(&path, actual).ctx("writing golden file")
        }
        Err(e) => Err(format!(
            "golden file {} unreadable ({e}); rerun with DAPT_BENCH_BLESS=1",
            path.display()
        )),
    }
}

fn within_budget(started: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let spent = started.elapsed();
    ensure!(
        spent < budget,
        "{what} took {:.1}s, budget {:.0}s",
        spent.as_secs_f64(),
        budget.as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------- metrics

#[derive(Default)]
struct Tally {
    checks: usize,
    worst: f64,
}

impl Tally {
    fn check(&mut self, what: &str, got: f64, want: f64) -> Result<(), String> {
        let err = (got - want).abs();
        self.checks += 1;
        self.worst = self.worst.max(err);
        ensure!(err <= 1e-9, "{what}: library {got} vs oracle {want}");
        Ok(())
    }
}

fn random_subset(rng: &mut ChaCha8Rng, universe: u32, p: f64) -> BTreeSet<u32> {
    (0..universe).filter(|_| rng.gen_bool(p)).collect()
}

fn oracle_dcg(list: &[u32], gold: &BTreeSet<u32>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, item) in list.iter().enumerate() {
        if i >= k {
            break;
        }
        if gold.contains(item) {
            dcg += 1.0 / (i as f64 + 2.0).log2();
        }
    }
    dcg
}

fn metric_oracles() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0acc_e971);
    let mut t = Tally::default();
    let mut empty_gold = 0usize;
    for _ in 0..10_000 {
        let u: u32 = rng.gen_range(1..=40);
        let density = rng.gen_range(0.0..0.5);
        let gold = random_subset(&mut rng, u, density);
        let mut ranked: Vec<u32> = (0..u).collect();
        ranked.shuffle(&mut rng);
        ranked.truncate(rng.gen_range(0..=u as usize));
        let k = rng.gen_range(1..=12usize);
        let rp = RankedPrediction::new(ranked.clone(), gold.clone());

        let top: BTreeSet<u32> = ranked.iter().take(k).copied().collect();
        let hits = top.intersection(&gold).count() as f64;
        t.check("P@K", precision_at_k(&rp, k).ctx("P@K")?, hits / k as f64)?;
        if gold.is_empty() {
            empty_gold += 1;
            ensure!(recall_at_k(&rp, k).is_err(), "R@K accepted an empty gold set");
            ensure!(r_precision_at_k(&rp, k).is_err(), "RP@K accepted an empty gold set");
            ensure!(ndcg_at_k(&rp, k).is_err(), "nDCG@K accepted an empty gold set");
        } else {
            t.check("R@K", recall_at_k(&rp, k).ctx("R@K")?, hits / gold.len() as f64)?;
            t.check(
                "RP@K",
                r_precision_at_k(&rp, k).ctx("RP@K")?,
                hits / k.min(gold.len()) as f64,
            )?;
            let ideal: Vec<u32> = gold
                .iter()
                .copied()
                .chain((0..u).filter(|l| !gold.contains(l)))
                .collect();
            let want = oracle_dcg(&ranked, &gold, k) / oracle_dcg(&ideal, &gold, k);
            t.check("nDCG@K", ndcg_at_k(&rp, k).ctx("nDCG@K")?, want)?;
        }

        let docs = rng.gen_range(1..=8);
        let predicted: Vec<BTreeSet<u32>> = (0..docs).map(|_| random_subset(&mut rng, u, 0.3)).collect();
        let golds: Vec<BTreeSet<u32>> = (0..docs).map(|_| random_subset(&mut rng, u, 0.3)).collect();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (p, g) in predicted.iter().zip(&golds) {
            for label in 0..u {
                match (p.contains(&label), g.contains(&label)) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    (false, false) => {}
                }
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if tp > 0.0 {
            2.0 * tp / (2.0 * tp + fp + fn_)
        } else {
            0.0
        };
        let (p, r, f) = prf1_micro(&predicted, &golds).ctx("prf1_micro")?;
        t.check("micro P", p, prec)?;
        t.check("micro R", r, rec)?;
        t.check("micro F1", f, f1)?;

        let n = rng.gen_range(1..=30usize);
        let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=60)).collect();
        let stats = rank_stats(&ranks).ctx("rank_stats")?;
        let at = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        let half = n.div_ceil(2);
        let median = (1..)
            .find(|&m| ranks.iter().filter(|&&r| r <= m).count() >= half)
            .expect("ranks are bounded");
        t.check("R1", stats.r1, at(1))?;
        t.check("R5", stats.r5, at(5))?;
        t.check("R10", stats.r10, at(10))?;
        t.check("MedRank", stats.med_rank, median as f64)?;
        t.check(
            "MeanRank",
            stats.mean_rank,
            ranks.iter().map(|&r| r as f64).sum::<f64>() / n as f64,
        )?;
    }
    within_budget(started, Duration::from_secs(30), "metric oracles")?;
    Ok(Verdict::Pass(format!(
        "10000 instances, {} comparisons, max |diff| {:.1e}, {empty_gold} empty-gold error paths",
        t.checks, t.worst
    )))
}

// ---------------------------------------------------------------- improvement fixture

const SLICES: [(f64, usize); 5] = [(1.0, 45000), (0.2, 9000), (0.1, 4500), (0.05, 2250), (0.01, 450)];

const BERT: [[f64; 7]; 5] = [
    [0.86, 0.62, 0.72, 0.72, 0.69, 0.79, 0.82],
    [0.66, 0.19, 0.29, 0.39, 0.35, 0.43, 0.46],
    [0.58, 0.09, 0.15, 0.30, 0.27, 0.33, 0.35],
    [0.49, 0.06, 0.11, 0.22, 0.20, 0.24, 0.26],
    [0.00, 0.00, 0.00, 0.03, 0.02, 0.03, 0.02],
];

const LEGAL_BERT: [[f64; 7]; 5] = [
    [0.86, 0.63, 0.73, 0.72, 0.69, 0.79, 0.82],
    [0.70, 0.19, 0.29, 0.40, 0.35, 0.43, 0.46],
    [0.64, 0.11, 0.18, 0.32, 0.28, 0.34, 0.37],
    [0.49, 0.07, 0.13, 0.24, 0.22, 0.26, 0.28],
    [0.00, 0.00, 0.00, 0.04, 0.03, 0.04, 0.04],
];

const PRINTED_DIFF: [[&str; 7]; 5] = [
    ["+0.00", "+0.00", "+0.01", "+0.00", "+0.00", "+0.00", "+0.00"],
    ["+0.04", "+0.00", "+0.00", "0.01", "0.00", "0.00", "+0.00"],
    ["+0.06", "+0.02", "+0.03", "0.02", "0.01", "0.01", "+0.02"],
    ["+0.0", "+0.01", "+0.02", "0.02", "0.02", "0.02", "+0.02"],
    ["+0.0", "+0.00", "+0.00", "0.01", "0.01", "0.01", "+0.02"],
];

const PRINTED_RELATIVE: [[&str; 7]; 5] = [
    ["0.0", "0.0", "1.4", "0.0", "0.0", "0.0", "0.0"],
    ["+6.1", "0.0", "0.0", "+2.8", "0.0", "0.0", "0.0"],
    ["+10.3", "+22", "+20", "+6.7", "+3.7", "+3.0", "+5.7"],
    ["0.0", "+17", "+18", "+9.1", "+10", "+8.3", "+7.7"],
    ["0.0", "0.0", "0.0", "+33", "+50", "+33", "+100"],
];

/// True when `value` rounds to the printed number at the printed precision.
fn rounds_to(value: f64, printed: &str) -> bool {
    let decimals = printed.split_once('.').map_or(0, |(_, frac)| frac.len()) as i32;
    let target: f64 = printed
        .trim_start_matches('+')
        .parse()
        .expect("printed cell is numeric");
    let scale = 10f64.powi(decimals);
    (value * scale).round() == (target * scale).round()
}

/// Searches baseline and adapted values inside their printed rounding
/// intervals (half a unit of the second decimal) for a pair that reproduces
/// both printed cells.
fn reachable(base: f64, adapted: f64, diff: &str, rel: &str) -> bool {
    let steps = 200;
    let offsets: Vec<f64> = (0..=steps).map(|i| -0.005 + 0.01 * i as f64 / steps as f64).collect();
    offsets.iter().any(|&db| {
        offsets.iter().any(|&da| {
            let (b, a) = (base + db, adapted + da);
            b > 0.0 && rounds_to(a - b, diff) && rounds_to(100.0 * (a - b) / b, rel)
        })
    })
}

fn report(values: &[f64; 7]) -> MetricsReport {
    MetricsReport::from_pairs(Metric::CLASSIFICATION.iter().copied().zip(values.iter().copied()))
}

fn improvement_fixture() -> Outcome {
    let rows = |data: &[[f64; 7]; 5]| -> Vec<SliceResult> {
        SLICES
            .iter()
            .zip(data)
            .map(|(&(ratio, n), v)| (ratio, n, report(v)))
            .collect()
    };
    let table =
        improvement_table(&rows(&BERT), &rows(&LEGAL_BERT), &Metric::CLASSIFICATION).ctx("improvement table")?;

    let mut direct = 0usize;
    let mut via_rounding = Vec::new();
    let mut mismatches = Vec::new();
    for (si, row) in table.rows.iter().enumerate() {
        for (mi, m) in Metric::CLASSIFICATION.iter().enumerate() {
            let diff = row.diff[m];
            let rel = row.relative_pct[m].ok_or_else(|| format!("relative {m} undefined at slice {si}"))?;
            let (pd, pr) = (PRINTED_DIFF[si][mi], PRINTED_RELATIVE[si][mi]);
            let cell = format!("{}% {}", 100.0 * row.ratio, m.header());
            if rounds_to(diff, pd) && rounds_to(rel, pr) {
                direct += 1;
            } else if reachable(BERT[si][mi], LEGAL_BERT[si][mi], pd, pr) {
                via_rounding.push(format!("{cell} printed {pd} / {pr}, rows give {diff:+.2} / {rel:+.2}"));
            } else {
                mismatches.push(format!("{cell} {diff:+.4} / {rel:+.3} vs printed {pd} / {pr}"));
            }
        }
    }
    ensure!(mismatches.is_empty(), "cells not reproduced: {}", mismatches.join("; "));

    let model = |name: &str, data: &[f64; 7]| ModelResults {
        name: name.into(),
        runs: vec![report(data)],
    };
    let slices = SLICES
        .iter()
        .enumerate()
        .map(|(i, &(ratio, n_train))| SliceResults {
            ratio,
            n_train,
            baseline: model("BERT", &BERT[i]),
            adapted: model("LegalBERT", &LEGAL_BERT[i]),
        })
        .collect();
    let markdown = build_table(&Results::Slices(slices), Layout::Ablation)
        .ctx("building table")?
        .to_markdown();
    check_golden("improvement_fixture.md", &markdown)?;

    let mut detail = format!("{direct}/35 cells reproduced directly from the rows, golden markdown identical");
    if !via_rounding.is_empty() {
        detail.push_str(&format!(
            "; {} cell(s) only reachable inside the rows' rounding intervals: {}",
            via_rounding.len(),
            via_rounding.join(", ")
        ));
    }
    Ok(Verdict::Pass(detail))
}

// ---------------------------------------------------------------- gradients

const GRAD_TEXTS: [&str; 4] = [
    "the court held the contract void for duress",
    "a tribunal found the lease valid and binding",
    "appeal dismissed with costs to the respondent",
    "the deed was signed by both parties in error",
];

const ALL_KINDS: [ParamKind; 7] = [
    ParamKind::TokenEmbedding,
    ParamKind::PositionEmbedding,
    ParamKind::Attention,
    ParamKind::FeedForward,
    ParamKind::LayerNorm,
    ParamKind::Adapter,
    ParamKind::Head,
];

fn grad_vocab() -> Result<Vocab, String> {
    train_vocab(GRAD_TEXTS, 96, 0).ctx("vocab")
}

fn grad_config(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: 12,
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        dropout_rate: 0.0,
    }
}

/// Adapted encoder with every parameter redrawn uniformly around its
/// initial centre.
fn grad_encoder(cfg: &EncoderConfig) -> Result<EncoderModel<f64>, String> {
    let base = init_model::<f64>(cfg, 11).ctx("init")?;
    let mut enc = insert_adapters(base, AdapterConfig { bottleneck_dim: 4 }).ctx("adapters")?;
    scramble(enc.params_mut(), 5);
    Ok(enc)
}

fn scramble(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let centre = if p.kind == ParamKind::LayerNorm && p.name.ends_with("gamma") {
            1.0
        } else {
            0.0
        };
        p.value.mapv_inplace(|_| centre + rng.gen_range(-0.3..0.3));
    }
}

fn seqs(vocab: &Vocab, texts: &[&str], len: usize) -> Vec<TokenSeq> {
    texts.iter().map(|t| encode(vocab, t, len)).collect()
}

fn gradcheck<M: Clone>(
    name: &str,
    model: &M,
    params: impl Fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M, &mut dapt_bench::encoder::Grads<f64>) -> dapt_bench::Result<f64>,
) -> Result<String, String> {
    let mut m = model.clone();
    let mut store = params(&mut m).clone();
    let report = finite_difference_check(
        &mut store,
        |p| {
            let mut local = model.clone();
            *params(&mut local) = p.clone();
            let mut g = p.zero_grads();
            let l = loss(&local, &mut g)?;
            Ok((l, g))
        },
        1e-5,
        300,
        1e-7,
        0x9ad,
    )
    .ctx(name)?;
    let missing: Vec<_> = ALL_KINDS.iter().filter(|k| !report.kinds_covered.contains(k)).collect();
    ensure!(missing.is_empty(), "{name}: kinds never sampled: {missing:?}");
    ensure!(report.samples >= 200, "{name}: only {} samples", report.samples);
    ensure!(
        report.max_rel_error < 1e-4,
        "{name}: max relative error {:.2e} at {} [{}]",
        report.max_rel_error,
        report.worst.0,
        report.worst.1
    );
    Ok(format!("{name} {:.1e}", report.max_rel_error))
}

/// Smallest distance of the in-batch triplet loss from one of its kinks:
/// a hinge at zero or a tie between the two hardest negatives.
fn triplet_kink_distance(sim: &Array2<f64>, margin: f64) -> f64 {
    let n = sim.nrows();
    let mut closest = f64::INFINITY;
    for i in 0..n {
        for negatives in [
            (0..n).filter(|&j| j != i).map(|j| sim[[i, j]]).collect::<Vec<_>>(),
            (0..n).filter(|&j| j != i).map(|j| sim[[j, i]]).collect::<Vec<_>>(),
        ] {
            let mut sorted = negatives;
            sorted.sort_by(|a, b| b.total_cmp(a));
            closest = closest.min((margin - sim[[i, i]] + sorted[0]).abs());
            if sorted.len() > 1 {
                closest = closest.min(sorted[0] - sorted[1]);
            }
        }
    }
    closest
}

fn gradient_exactness() -> Outcome {
    let started = Instant::now();
    let vocab = grad_vocab()?;
    let cfg = grad_config(&vocab);
    let texts: Vec<&str> = GRAD_TEXTS.to_vec();
    let mut lines = Vec::new();

    let mlm = MlmModel::new(grad_encoder(&cfg)?, true);
    let masked: Vec<_> = seqs(&vocab, &texts, cfg.max_seq_len)
        .iter()
        .enumerate()
        .map(|(i, s)| mask_for_mlm(&vocab, s, 0.4, 100 + i as u64))
        .collect::<dapt_bench::Result<_>>()
        .ctx("masking")?;
    ensure!(
        masked.iter().all(|m| m.num_targets() > 0),
        "MLM fixture has a sequence without targets"
    );
    let mut mlm_scrambled = mlm.clone();
    scramble(mlm_scrambled.encoder.params_mut(), 6);
    lines.push(gradcheck(
        "MLM",
        &mlm_scrambled,
        |m| m.encoder.params_mut(),
        |m, g| m.loss_and_grad(&masked, Mode::Eval, g),
    )?);

    let labels: Vec<String> = (0..5).map(|i| format!("label{i}")).collect();
    let mut clf = ClassifierModel::new(grad_encoder(&cfg)?, labels).ctx("classifier")?;
    scramble(clf.encoder.params_mut(), 7);
    let batch = seqs(&vocab, &texts, cfg.max_seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let targets = Array2::from_shape_fn((texts.len(), 5), |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    lines.push(gradcheck(
        "BCE",
        &clf,
        |m| m.encoder.params_mut(),
        |m, g| m.loss_and_grad(&batch, targets.view(), Mode::Eval, g),
    )?);

    let options = RetrievalOptions {
        margin: 0.2,
        shared_dim: 8,
        pooling: Pooling::Mean,
        freeze_encoder: false,
        phrase_max_len: cfg.max_seq_len,
    };
    let phrases = ["void contract", "valid lease", "costs awarded", "mistaken deed"];
    let mut ret = RetrieverModel::new(grad_encoder(&cfg)?, options.clone()).ctx("retriever")?;
    scramble(ret.encoder.params_mut(), 9);
    let sim = ret
        .embed_cases(&vocab, &texts)
        .ctx("embed")?
        .dot(&ret.embed_phrases(&vocab, &phrases).ctx("embed")?.t());
    let kink = triplet_kink_distance(&sim, options.margin);
    ensure!(kink > 1e-3, "triplet fixture lies {kink:.1e} from a hinge kink");
    let case_seqs = seqs(&vocab, &texts, cfg.max_seq_len);
    let phrase_seqs = seqs(&vocab, &phrases, cfg.max_seq_len);
    lines.push(gradcheck(
        "triplet",
        &ret,
        |m| m.encoder.params_mut(),
        |m, g| m.loss_and_grad(&case_seqs, &phrase_seqs, |i, j| i != j, Mode::Eval, g),
    )?);

    within_budget(started, Duration::from_secs(120), "gradient checks")?;
    Ok(Verdict::Pass(format!(
        "max relative error per loss: {}; 300 samples each over all 7 tensor kinds",
        lines.join(", ")
    )))
}

// ---------------------------------------------------------------- adapters

fn shipped(name: &str) -> Result<ExperimentConfig, String> {
    ExperimentConfig::load(&repo_root().join("configs").join(name)).ctx(name)
}

fn max_abs_delta<T: dapt_bench::encoder::Scalar>(a: &ndarray::Array3<T>, b: &ndarray::Array3<T>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn identity_delta<T: dapt_bench::encoder::Scalar>(cfg: &EncoderConfig, batch: &[TokenSeq]) -> Result<f64, String> {
    let plain = init_model::<T>(cfg, 21).ctx("init")?;
    let before = plain.encode_sequence(batch).ctx("encode")?;
    let adapted = insert_adapters(plain, AdapterConfig { bottleneck_dim: 8 }).ctx("adapters")?;
    let after = adapted.encode_sequence(batch).ctx("encode")?;
    Ok(max_abs_delta(&before, &after))
}

fn bits_equal(a: &ndarray::ArrayD<f32>, b: &ndarray::ArrayD<f32>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn adapter_invariants() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec::default()).ctx("synthetic")?;
    let bodies: Vec<&str> = data.classification.train.iter().map(|d| d.text.as_str()).collect();
    let vocab = train_vocab(&bodies, 400, 0).ctx("vocab")?;
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: 32,
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 64,
        ffn_dim: 128,
        dropout_rate: 0.0,
    };
    let batch = seqs(&vocab, &bodies[..8], cfg.max_seq_len);
    let d64 = identity_delta::<f64>(&cfg, &batch)?;
    let d32 = identity_delta::<f32>(&cfg, &batch)?;
    ensure!(
        d64 <= 1e-6 && d32 <= 1e-6,
        "insertion changed outputs by {d64:.1e} (f64) / {d32:.1e} (f32)"
    );

    let small = EncoderConfig {
        hidden_dim: 32,
        ffn_dim: 64,
        ..cfg.clone()
    };
    let encoder = insert_adapters(
        init_model::<f32>(&small, 3).ctx("init")?,
        AdapterConfig { bottleneck_dim: 8 },
    )
    .ctx("adapters")?;
    let snapshot = encoder.params().clone();
    let train = TrainConfig {
        base_lr: 2e-3,
        epochs: 1000,
        total_steps: 120,
        patience: 1000,
        ..TrainConfig::default()
    };
    let (model, report) =
        train_classifier(encoder, &vocab, &data.classification, &train, TrainMode::AdapterOnly).ctx("training")?;
    ensure!(report.steps >= 100, "only {} adapter-only steps ran", report.steps);
    let (mut frozen, mut moved_adapters, mut moved_norms) = (0usize, 0usize, 0usize);
    for before in snapshot.iter() {
        let id = model
            .encoder
            .params()
            .find(&before.name)
            .ok_or_else(|| format!("{} vanished", before.name))?;
        let after = &model.encoder.params().param(id).value;
        let same = bits_equal(&before.value, after);
        match (before.group, before.kind) {
            (ParamGroup::Base, ParamKind::LayerNorm) => moved_norms += usize::from(!same),
            (ParamGroup::Base, _) => {
                ensure!(
                    same,
                    "frozen tensor {} changed during adapter-only training",
                    before.name
                );
                frozen += 1;
            }
            (ParamGroup::Adapter, _) => moved_adapters += usize::from(!same),
            _ => {}
        }
    }
    ensure!(
        moved_adapters > 0 && moved_norms > 0,
        "adapter-only training left adapters and layer norms untouched"
    );

    let shipped_cfg = shipped("adapter-compare.toml")?;
    let adapter = shipped_cfg
        .adapter
        .ok_or("shipped adapter profile has no adapter section")?;
    let num_labels = generate_synthetic(shipped_cfg.data.synthetic.as_ref().ok_or("profile is not synthetic")?)
        .ctx("synthetic")?
        .classification
        .label_universe
        .len();
    let toy = insert_adapters(init_model::<f32>(&shipped_cfg.encoder, 0).ctx("init")?, adapter).ctx("adapters")?;
    let toy = ClassifierModel::new(toy, (0..num_labels).map(|i| format!("l{i}")).collect()).ctx("classifier")?;
    let fraction = trainable_parameters(&toy.encoder, TrainMode::AdapterOnly)
        .ctx("selection")?
        .trainable_fraction(toy.encoder.params());
    ensure!(
        fraction < 0.10,
        "adapter-only trainable fraction {:.2}%",
        100.0 * fraction
    );

    Ok(Verdict::Pass(format!(
        "insertion delta {d64:.1e} (f64) / {d32:.1e} (f32); {frozen} base tensors bit-identical after {} steps; \
         trainable fraction {:.2}% on the shipped profile",
        report.steps,
        100.0 * fraction
    )))
}

// ---------------------------------------------------------------- MLM

fn mlm_statistics() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec::default()).ctx("synthetic")?;
    let vocab = train_vocab(&data.domain_corpus, 512, 0).ctx("vocab")?;
    let encoded: Vec<TokenSeq> = data.domain_corpus.iter().map(|t| encode(&vocab, t, 64)).collect();

    let (mut maskable, mut selected, mut masked, mut random, mut kept) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut pass = 0u64;
    while selected < 100_000 {
        for (i, seq) in encoded.iter().enumerate() {
            let m = mask_for_mlm(&vocab, seq, 0.15, derive_seed(pass, i as u64)).ctx("masking")?;
            for (pos, target) in m.targets.iter().enumerate() {
                if seq.attention_mask[pos] == 1 && seq.ids[pos] as usize >= dapt_bench::tokenizer::NUM_SPECIALS {
                    maskable += 1;
                }
                let Some(original) = target else { continue };
                selected += 1;
                let input = m.input.ids[pos];
                if input == MASK {
                    masked += 1;
                } else if input == *original {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
        pass += 1;
    }
    let rate = selected as f64 / maskable as f64;
    let share = |c: usize| c as f64 / selected as f64;
    ensure!((rate - 0.15).abs() <= 0.005, "selection rate {rate:.4}");
    ensure!((share(masked) - 0.8).abs() <= 0.01, "[MASK] share {:.4}", share(masked));
    ensure!((share(random) - 0.1).abs() <= 0.01, "random share {:.4}", share(random));
    ensure!((share(kept) - 0.1).abs() <= 0.01, "unchanged share {:.4}", share(kept));

    let small = EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: 32,
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        dropout_rate: 0.0,
    };
    let model = MlmModel::new(init_model::<f64>(&small, 4).ctx("init")?, true);
    let opts = DaptOptions::default();
    let corpus = &data.domain_corpus[..40];
    let ppl = perplexity(&model, &vocab, corpus, &opts).ctx("perplexity")?;
    let mut grads = model.encoder.params().zero_grads();
    let (mut nll, mut count) = (0.0f64, 0usize);
    for (i, text) in corpus.iter().enumerate() {
        let m = mask_for_mlm(
            &vocab,
            &encode(&vocab, text, small.max_seq_len),
            opts.mask_rate,
            derive_seed(opts.eval_seed, i as u64),
        )
        .ctx("masking")?;
        if m.num_targets() == 0 {
            continue;
        }
        let mean = model
            .loss_and_grad(std::slice::from_ref(&m), Mode::Eval, &mut grads)
            .ctx("loss")?;
        nll += mean * m.num_targets() as f64;
        count += m.num_targets();
    }
    let want = (nll / count as f64).exp();
    let rel = (ppl - want).abs() / want;
    ensure!(rel <= 1e-9, "perplexity {ppl} vs exp(mean NLL) {want}");

    Ok(Verdict::Pass(format!(
        "{selected} selected of {maskable}: rate {rate:.4}, mask/random/keep {:.4}/{:.4}/{:.4}; \
         perplexity {ppl:.3} matches exp(mean NLL) to {rel:.1e}",
        share(masked),
        share(random),
        share(kept)
    )))
}

// ---------------------------------------------------------------- learning

fn dapt_overfit() -> Result<String, String> {
    let spec = SyntheticSpec {
        doc_len: 12,
        domain_docs: 32,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let corpus: Vec<String> = generate_synthetic(&spec)
        .ctx("synthetic")?
        .domain_corpus
        .into_iter()
        .take(32)
        .collect();
    ensure!(corpus.len() == 32, "fixture has {} sentences", corpus.len());
    let vocab = train_vocab(&corpus, 256, 0).ctx("vocab")?;
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: 16,
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 64,
        ffn_dim: 128,
        dropout_rate: 0.0,
    };
    let model = MlmModel::new(init_model::<f32>(&cfg, 0).ctx("init")?, true);
    let train = TrainConfig {
        base_lr: 2e-3,
        min_lr: 0.0,
        epochs: 800,
        total_steps: 100_000,
        batch_size: 8,
        ..TrainConfig::pretraining(100_000)
    };
    let (_, report) = run_dapt(model, &vocab, &corpus, &corpus, &train, &DaptOptions::default()).ctx("dapt")?;
    let ppl = report.perplexity.ok_or("no final perplexity")?;
    ensure!(ppl <= 1.5, "overfit perplexity {ppl:.3} after {} steps", report.steps);
    Ok(format!(
        "(a) perplexity {:.1} -> {ppl:.3} on 32 sentences",
        report.initial_perplexity.unwrap_or(f64::NAN)
    ))
}

fn cell_reports(root: &Path) -> Result<BTreeMap<String, RunReport>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(root.join("runs")).ctx("runs dir")? {
        let dir = entry.ctx("runs dir")?.path();
        for seed in fs::read_dir(&dir).ctx("cell dir")? {
            let path = seed.ctx("cell dir")?.path().join("report.json");
            let r: RunReport = read_json(&path).ctx("report")?;
            out.insert(format!("{}/{}", r.cell, r.seed), r);
        }
    }
    Ok(out)
}

fn run_shipped(name: &str, out: &Path) -> Result<dapt_bench::cli::RunOutcome, String> {
    let mut cfg = shipped(name)?;
    cfg.output_dir = out.to_path_buf();
    run_experiment(&cfg).ctx(name)
}

fn desk_learning() -> Outcome {
    let started = Instant::now();
    let a = dapt_overfit()?;

    let tmp = tempfile::tempdir().ctx("tempdir")?;
    let outcome = run_shipped("adapter-compare.toml", tmp.path())?;
    let reports = cell_reports(&outcome.root)?;
    let dev_f1 = |adapter: bool| -> Result<f64, String> {
        let r = reports
            .values()
            .find(|r| (r.trainable_fraction < 1.0) == adapter && r.cell != "pretrain")
            .ok_or("missing fine-tuning cell")?;
        r.dev_metrics.get(Metric::F1).ctx("dev F1")
    };
    let (full, adapter) = (dev_f1(false)?, dev_f1(true)?);
    ensure!(full >= 0.9, "full fine-tuning dev F1 {full:.3}");
    ensure!(
        (full - adapter).abs() <= 0.05,
        "adapter-only dev F1 {adapter:.3} vs full {full:.3}"
    );

    let outcome = run_shipped("retrieve.toml", tmp.path())?;
    let reports = cell_reports(&outcome.root)?;
    let r1 = reports
        .values()
        .next()
        .ok_or("no retrieval report")?
        .dev_metrics
        .get(Metric::R1)
        .ctx("dev R1")?;
    ensure!(r1 >= 60.0, "retrieval dev R@1 {r1:.1}");

    within_budget(started, Duration::from_secs(15 * 60), "desk-scale learning")?;
    Ok(Verdict::Pass(format!(
        "{a}; (b) dev F1 full {full:.3}, adapter-only {adapter:.3}; (c) dev R@1 {r1:.1}"
    )))
}

// ---------------------------------------------------------------- ablation

fn mean_f1(m: &ModelResults) -> Result<f64, String> {
    let values = m
        .runs
        .iter()
        .map(|r| r.get(Metric::F1))
        .collect::<dapt_bench::Result<Vec<_>>>()
        .ctx("F1")?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn ablation_directionality() -> Outcome {
    let tmp = tempfile::tempdir().ctx("tempdir")?;
    let outcome = run_shipped("ablation.toml", tmp.path())?;
    let Some(Results::Slices(slices)) = &outcome.results else {
        return Err("ablation produced no slice results".into());
    };
    let relative = |ratio: f64| -> Result<f64, String> {
        let s = slices
            .iter()
            .find(|s| s.ratio == ratio)
            .ok_or(format!("no {ratio} slice"))?;
        let (base, adapted) = (mean_f1(&s.baseline)?, mean_f1(&s.adapted)?);
        ensure!(base > 0.0, "scratch F1 is zero at ratio {ratio}");
        Ok(100.0 * (adapted - base) / base)
    };
    let (small, full) = (relative(0.01)?, relative(1.0)?);
    ensure!(
        small > full,
        "relative F1 gain at 1% ({small:+.1}%) does not exceed 100% ({full:+.1}%)"
    );
    let text = outcome.table_text.as_deref().ok_or("no table emitted")?;
    check_golden("ablation_desk.md", text)?;
    Ok(Verdict::Pass(format!(
        "relative F1 gain {small:+.1}% at 1% vs {full:+.1}% at 100%; table matches golden"
    )))
}

// ---------------------------------------------------------------- determinism

const DETERMINISM_CONFIGS: [&str; 2] = [
    r#"
task = "ablation"
seeds = [0, 1]
ratios = [1.0, 0.5]
[data.synthetic]
num_topics = 4
docs_per_topic = 30
domain_docs = 80
[encoder]
vocab_size = 256
max_seq_len = 24
num_layers = 1
num_heads = 2
hidden_dim = 16
ffn_dim = 32
dropout_rate = 0.1
[train]
base_lr = 2e-3
epochs = 3
[pretrain]
base_lr = 1e-3
epochs = 2
"#,
    r#"
task = "retrieve"
seeds = [3]
inits = ["random"]
[data.synthetic]
num_topics = 4
docs_per_topic = 30
domain_docs = 80
[encoder]
vocab_size = 256
max_seq_len = 24
num_layers = 1
num_heads = 2
hidden_dim = 16
ffn_dim = 32
dropout_rate = 0.1
[train]
base_lr = 2e-4
epochs = 3
"#,
];

fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).ctx("listing run dir")? {
            let path = entry.ctx("listing run dir")?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "wall_time_secs.txt") {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                files.insert(rel, fs::read(&path).ctx("reading output")?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().ctx("tempdir")?;
    let mut compared = 0usize;
    for text in DETERMINISM_CONFIGS {
        let mut cfg = ExperimentConfig::from_toml_str(text).ctx("config")?;
        cfg.output_dir = tmp.path().to_path_buf();
        let first = run_experiment(&cfg).ctx("first run")?;
        let files = snapshot(&first.root)?;
        fs::remove_dir_all(&first.root).ctx("clearing run dir")?;
        let second = run_experiment(&cfg).ctx("second run")?;
        ensure!(first.root == second.root, "run root moved between runs");
        let again = snapshot(&second.root)?;
        ensure!(
            files.keys().eq(again.keys()),
            "different file sets: {:?} vs {:?}",
            files.keys().collect::<Vec<_>>(),
            again.keys().collect::<Vec<_>>()
        );
        for (path, bytes) in &files {
            ensure!(
                again[path] == *bytes,
                "{} differs between identical runs",
                path.display()
            );
        }
        let resumed = run_experiment(&cfg).ctx("resumed run")?;
        ensure!(resumed.trained == 0, "resumed run retrained {} cells", resumed.trained);
        ensure!(resumed.table_text == second.table_text, "resumed table differs");
        compared += files.len();
    }
    Ok(Verdict::Pass(format!(
        "{compared} output files byte-identical across fresh reruns of an ablation and a retrieval grid"
    )))
}

// ---------------------------------------------------------------- datasets

fn dataset_integration() -> Outcome {
    let mut checked = Vec::new();
    let mut skipped = Vec::new();
    match std::env::var_os("EURLEX57K_DIR") {
        Some(dir) => {
            let set =
                load_classification_dataset(Path::new(&dir), ClassificationFormat::EurlexJsonDir).ctx("EURLEX57K")?;
            let sizes = (set.train.len(), set.dev.len(), set.test.len());
            ensure!(sizes == (45_000, 6_000, 6_000), "EURLEX57K splits {sizes:?}");
            let buckets = partition_labels(&set).ctx("label buckets")?.sizes();
            ensure!(buckets == (746, 3_362, 163), "label buckets {buckets:?}");
            checked.push("EURLEX57K 45000/6000/6000, buckets 746/3362/163");
        }
        None => skipped.push("EURLEX57K_DIR"),
    }
    match std::env::var_os("AUS_CASES_DIR") {
        Some(dir) => {
            let (set, _) = load_case_dataset(Path::new(&dir), CaseFormat::AusXmlDir, 0).ctx("AUS cases")?;
            let sizes = (set.train.len(), set.dev.len(), set.test.len());
            ensure!(sizes == (2_807, 350, 350), "AUS splits {sizes:?}");
            checked.push("AUS cases 2807/350/350");
        }
        None => skipped.push("AUS_CASES_DIR"),
    }
    if checked.is_empty() {
        return Ok(Verdict::Skip(format!("{} not set", skipped.join(" and "))));
    }
    let mut detail = checked.join("; ");
    if !skipped.is_empty() {
        detail.push_str(&format!(" ({} not set)", skipped.join(", ")));
    }
    Ok(Verdict::Pass(detail))
}
