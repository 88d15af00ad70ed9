//! Ranking and set metrics for multi-label classification and retrieval,
//! plus the baseline-versus-adapted improvement arithmetic.

mod predictions;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use predictions::{read_predictions, write_predictions, PredictionRecord};

/// Every metric reported by the harness. Classification metrics are
/// fractions in `[0, 1]`; retrieval recalls are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    F1,
    RAt5,
    PAt5,
    RpAt5,
    NdcgAt5,
    R1,
    R5,
    R10,
    MedRank,
    MeanRank,
}

impl Metric {
    pub const CLASSIFICATION: [Metric; 7] = [
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::RAt5,
        Metric::PAt5,
        Metric::RpAt5,
        Metric::NdcgAt5,
    ];
    pub const RETRIEVAL: [Metric; 5] = [Metric::R1, Metric::R5, Metric::R10, Metric::MedRank, Metric::MeanRank];

    /// Column header used in emitted tables.
    pub fn header(self) -> &'static str {
        match self {
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1",
            Metric::RAt5 => "R@5",
            Metric::PAt5 => "P@5",
            Metric::RpAt5 => "RP@5",
            Metric::NdcgAt5 => "NDCG@5",
            Metric::R1 => "R1",
            Metric::R5 => "R5",
            Metric::R10 => "R10",
            Metric::MedRank => "MedRank",
            Metric::MeanRank => "MeanRank",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::RAt5 => "r_at_5",
            Metric::PAt5 => "p_at_5",
            Metric::RpAt5 => "rp_at_5",
            Metric::NdcgAt5 => "ndcg_at_5",
            Metric::R1 => "r1",
            Metric::R5 => "r5",
            Metric::R10 => "r10",
            Metric::MedRank => "med_rank",
            Metric::MeanRank => "mean_rank",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::MedRank | Metric::MeanRank)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricsReport(pub BTreeMap<Metric, f64>);

impl MetricsReport {
    pub fn get(&self, m: Metric) -> Result<f64> {
        self.0
            .get(&m)
            .copied()
            .ok_or_else(|| Error::MissingMetric(m.key().into()))
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        self.0.insert(m, v);
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Metric, f64)>) -> Self {
        MetricsReport(pairs.into_iter().collect())
    }
}

/// Candidates in descending score order together with the relevant set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedPrediction<I = String> {
    pub ranked: Vec<I>,
    pub gold: BTreeSet<I>,
}

impl<I: Ord> RankedPrediction<I> {
    pub fn new(ranked: Vec<I>, gold: BTreeSet<I>) -> Self {
        RankedPrediction { ranked, gold }
    }

    fn hits(&self, k: usize) -> usize {
        self.ranked.iter().take(k).filter(|c| self.gold.contains(c)).count()
    }

    fn require_gold(&self, what: &str) -> Result<()> {
        if self.gold.is_empty() {
            Err(Error::invalid(format!("{what} is undefined for an empty gold set")))
        } else {
            Ok(())
        }
    }
}

fn require_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::invalid("k must be at least 1"))
    } else {
        Ok(())
    }
}

/// Micro-averaged precision, recall and F1 over all (document, label)
/// decisions. Empty denominators yield 0.
pub fn prf1_micro<I: Ord>(predicted: &[BTreeSet<I>], gold: &[BTreeSet<I>]) -> Result<(f64, f64, f64)> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} documents",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        let overlap = p.intersection(g).count();
        tp += overlap;
        fp += p.len() - overlap;
        fn_ += g.len() - overlap;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

pub fn recall_at_k<I: Ord>(r: &RankedPrediction<I>, k: usize) -> Result<f64> {
    require_k(k)?;
    r.require_gold("R@K")?;
    Ok(r.hits(k) as f64 / r.gold.len() as f64)
}

pub fn precision_at_k<I: Ord>(r: &RankedPrediction<I>, k: usize) -> Result<f64> {
    require_k(k)?;
    Ok(r.hits(k) as f64 / k as f64)
}

/// Hits in the top `k` divided by `min(k, |gold|)`.
pub fn r_precision_at_k<I: Ord>(r: &RankedPrediction<I>, k: usize) -> Result<f64> {
    require_k(k)?;
    r.require_gold("RP@K")?;
    Ok(r.hits(k) as f64 / k.min(r.gold.len()) as f64)
}

/// Binary-gain nDCG.
pub fn ndcg_at_k<I: Ord>(r: &RankedPrediction<I>, k: usize) -> Result<f64> {
    require_k(k)?;
    r.require_gold("nDCG@K")?;
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = r
        .ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, c)| r.gold.contains(c))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..k.min(r.gold.len())).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub med_rank: f64,
    pub mean_rank: f64,
}

impl RankStats {
    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_pairs([
            (Metric::R1, self.r1),
            (Metric::R5, self.r5),
            (Metric::R10, self.r10),
            (Metric::MedRank, self.med_rank),
            (Metric::MeanRank, self.mean_rank),
        ])
    }
}

/// Recall percentages at 1/5/10 and median (lower-middle) and mean rank of
/// 1-based ranks.
pub fn rank_stats(ranks: &[usize]) -> Result<RankStats> {
    if ranks.is_empty() {
        return Err(Error::invalid("rank_stats needs at least one rank"));
    }
    if ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    let n = ranks.len() as f64;
    let pct = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(RankStats {
        r1: pct(1),
        r5: pct(5),
        r10: pct(10),
        med_rank: sorted[(sorted.len() - 1) / 2] as f64,
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
    })
}

/// Outcome of scoring a classification run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationEval {
    pub report: MetricsReport,
    /// Documents left out of R@K / RP@K / nDCG because their gold set was empty.
    pub excluded_empty_gold: usize,
}

/// Full classification metric set: micro P/R/F1 on thresholded sets and the
/// @k ranking metrics on score orderings. With `label_filter`, both
/// predictions and gold are restricted to those labels first.
pub fn evaluate_classification<I: Ord + Clone>(
    predicted: &[BTreeSet<I>],
    ranked: &[RankedPrediction<I>],
    k: usize,
    label_filter: Option<&BTreeSet<I>>,
) -> Result<ClassificationEval> {
    if predicted.len() != ranked.len() {
        return Err(Error::Shape("predicted sets and rankings differ in length".into()));
    }
    let keep = |set: &BTreeSet<I>| -> BTreeSet<I> {
        match label_filter {
            Some(f) => set.intersection(f).cloned().collect(),
            None => set.clone(),
        }
    };
    let preds: Vec<BTreeSet<I>> = predicted.iter().map(keep).collect();
    let rankings: Vec<RankedPrediction<I>> = ranked
        .iter()
        .map(|r| RankedPrediction {
            ranked: r
                .ranked
                .iter()
                .filter(|c| label_filter.is_none_or(|f| f.contains(c)))
                .cloned()
                .collect(),
            gold: keep(&r.gold),
        })
        .collect();
    let golds: Vec<BTreeSet<I>> = rankings.iter().map(|r| r.gold.clone()).collect();
    let (p, r, f1) = prf1_micro(&preds, &golds)?;

    let (mut rk, mut rpk, mut ndcg, mut pk) = (0.0, 0.0, 0.0, 0.0);
    let mut with_gold = 0usize;
    for rp in &rankings {
        pk += precision_at_k(rp, k)?;
        if rp.gold.is_empty() {
            continue;
        }
        with_gold += 1;
        rk += recall_at_k(rp, k)?;
        rpk += r_precision_at_k(rp, k)?;
        ndcg += ndcg_at_k(rp, k)?;
    }
    let mean = |total: f64, n: usize| if n == 0 { 0.0 } else { total / n as f64 };
    let report = MetricsReport::from_pairs([
        (Metric::Precision, p),
        (Metric::Recall, r),
        (Metric::F1, f1),
        (Metric::RAt5, mean(rk, with_gold)),
        (Metric::PAt5, mean(pk, rankings.len())),
        (Metric::RpAt5, mean(rpk, with_gold)),
        (Metric::NdcgAt5, mean(ndcg, with_gold)),
    ]);
    Ok(ClassificationEval {
        report,
        excluded_empty_gold: rankings.len() - with_gold,
    })
}

/// One line of an improvement table: a training-data slice with its
/// baseline and adapted results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub ratio: f64,
    pub n_train: usize,
    pub baseline: MetricsReport,
    pub adapted: MetricsReport,
    pub diff: BTreeMap<Metric, f64>,
    /// `None` when the baseline is zero but the difference is not.
    pub relative_pct: BTreeMap<Metric, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub metrics: Vec<Metric>,
    pub rows: Vec<ImprovementRow>,
}

/// A slice result: `(ratio, n_train, metrics)`.
pub type SliceResult = (f64, usize, MetricsReport);

/// `relative% = 100 * diff / baseline`; zero when both are zero.
pub fn relative_improvement(baseline: f64, diff: f64) -> Option<f64> {
    if baseline == 0.0 {
        (diff == 0.0).then_some(0.0)
    } else {
        Some(100.0 * diff / baseline)
    }
}

pub fn improvement_table(
    baseline: &[SliceResult],
    adapted: &[SliceResult],
    metrics: &[Metric],
) -> Result<ImprovementTable> {
    if baseline.len() != adapted.len() {
        return Err(Error::invalid(format!(
            "{} baseline rows but {} adapted rows",
            baseline.len(),
            adapted.len()
        )));
    }
    let mut rows = Vec::with_capacity(baseline.len());
    for ((ratio, n, base), (ratio_a, n_a, adapt)) in baseline.iter().zip(adapted) {
        if ratio != ratio_a || n != n_a {
            return Err(Error::invalid(format!(
                "misaligned rows: ratio {ratio} (n={n}) vs ratio {ratio_a} (n={n_a})"
            )));
        }
        let mut diff = BTreeMap::new();
        let mut relative_pct = BTreeMap::new();
        for &m in metrics {
            let (b, a) = (base.get(m)?, adapt.get(m)?);
            diff.insert(m, a - b);
            relative_pct.insert(m, relative_improvement(b, a - b));
        }
        rows.push(ImprovementRow {
            ratio: *ratio,
            n_train: *n,
            baseline: base.clone(),
            adapted: adapt.clone(),
            diff,
            relative_pct,
        });
    }
    Ok(ImprovementTable {
        metrics: metrics.to_vec(),
        rows,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
