use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ratio_percent, TableFormat};
use crate::error::{Error, Result};
use crate::metrics::{improvement_table, mean_std, Metric, MetricsReport, SliceResult};

const CLASSIFICATION: [Metric; 7] = Metric::CLASSIFICATION;
const RETRIEVAL: [Metric; 5] = Metric::RETRIEVAL;

/// Printed for a relative improvement over a zero baseline.
pub const MISSING: &str = "\u{2014}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Classification results per model.
    Classification,
    /// Data-size ablation with absolute and relative improvements.
    Ablation,
    /// Retrieval results per model.
    Retrieval,
    /// Full fine-tuning against adapter-only diffs.
    AdapterDiff,
}

impl Layout {
    /// File stem of the emitted table.
    pub fn name(self) -> &'static str {
        match self {
            Layout::Classification => "classification",
            Layout::Ablation => "ablation",
            Layout::Retrieval => "retrieval",
            Layout::AdapterDiff => "adapter-diff",
        }
    }

    pub fn decimals(self) -> usize {
        match self {
            Layout::Retrieval => 1,
            _ => 2,
        }
    }

    pub fn metrics(self) -> &'static [Metric] {
        match self {
            Layout::Retrieval => &RETRIEVAL,
            _ => &CLASSIFICATION,
        }
    }
}

/// Per-seed metric reports of one model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResults {
    pub name: String,
    pub runs: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResults {
    pub ratio: f64,
    pub n_train: usize,
    pub baseline: ModelResults,
    pub adapted: ModelResults,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterResults {
    pub full: ModelResults,
    pub adapter: ModelResults,
}

/// Everything a results table can be built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Results {
    Models(Vec<ModelResults>),
    Slices(Vec<SliceResults>),
    AdapterPairs(Vec<AdapterResults>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Label(String),
    Value(f64),
    Signed(f64),
    Spread(f64),
    Relative(f64),
    Missing,
}

/// A rendered-ready table: label columns followed by metric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub layout: Layout,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ResultsTable {
    fn cell_text(&self, cell: &Cell) -> String {
        let d = self.layout.decimals();
        match cell {
            Cell::Label(s) => s.clone(),
            Cell::Value(v) => format!("{:.*}", d, v),
            Cell::Signed(v) => signed(*v, d),
            Cell::Spread(v) => format!("±{:.*}", d, v),
            Cell::Relative(v) => relative_text(Some(*v)),
            Cell::Missing => MISSING.to_string(),
        }
    }

    pub fn text_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|c| self.cell_text(c)).collect())
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        out.push_str(&line(&self.header));
        let rule: Vec<String> = self.header.iter().map(|_| "---".to_string()).collect();
        out.push_str(&line(&rule));
        for row in self.text_rows() {
            out.push_str(&line(&row));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(&self.header).map_err(csv_err)?;
        for row in self.text_rows() {
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn render(&self, fmt: TableFormat) -> Result<String> {
        match fmt {
            TableFormat::Markdown => Ok(self.to_markdown()),
            TableFormat::Csv => self.to_csv(),
        }
    }
}

/// Rounds to `decimals` and prints with an explicit sign; zero is `+0.00`.
fn signed(v: f64, decimals: usize) -> String {
    let s = format!("{:+.*}", decimals, v);
    match s.strip_prefix('-') {
        Some(rest) if rest.chars().all(|c| c == '0' || c == '.') => format!("+{rest}"),
        _ => s,
    }
}

/// Relative improvement: one decimal, `+` for gains, plain `0.0` for none.
fn relative_text(v: Option<f64>) -> String {
    match v {
        None => MISSING.to_string(),
        Some(x) => {
            let s = signed(x, 1);
            if s == "+0.0" {
                "0.0".into()
            } else {
                s
            }
        }
    }
}

fn mean_report(runs: &[MetricsReport], metrics: &[Metric]) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::invalid("model has no runs"));
    }
    let mut out = MetricsReport::default();
    for &m in metrics {
        let vals = runs.iter().map(|r| r.get(m)).collect::<Result<Vec<_>>>()?;
        out.set(m, mean_std(&vals).expect("non-empty").0);
    }
    Ok(out)
}

/// Mean and, for more than one run, population std per metric.
pub fn aggregate(runs: &[MetricsReport], metrics: &[Metric]) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let mean = mean_report(runs, metrics)?;
    if runs.len() < 2 {
        return Ok((mean, None));
    }
    let mut std = MetricsReport::default();
    for &m in metrics {
        let vals = runs.iter().map(|r| r.get(m)).collect::<Result<Vec<_>>>()?;
        std.set(m, mean_std(&vals).expect("non-empty").1);
    }
    Ok((mean, Some(std)))
}

fn metric_cells(r: &MetricsReport, metrics: &[Metric], cell: fn(f64) -> Cell) -> Result<Vec<Cell>> {
    metrics.iter().map(|&m| r.get(m).map(cell)).collect()
}

fn labelled(labels: &[&str], cells: Vec<Cell>) -> Vec<Cell> {
    labels
        .iter()
        .map(|l| Cell::Label((*l).to_string()))
        .chain(cells)
        .collect()
}

fn header(labels: &[&str], metrics: &[Metric]) -> Vec<String> {
    labels
        .iter()
        .map(|s| s.to_string())
        .chain(metrics.iter().map(|m| m.header().to_string()))
        .collect()
}

fn model_rows(models: &[ModelResults], layout: Layout) -> Result<Vec<Vec<Cell>>> {
    let metrics = layout.metrics();
    let mut rows = Vec::new();
    for model in models {
        let (mean, std) = aggregate(&model.runs, metrics)?;
        rows.push(labelled(&[&model.name], metric_cells(&mean, metrics, Cell::Value)?));
        if let Some(std) = std {
            rows.push(labelled(&[""], metric_cells(&std, metrics, Cell::Spread)?));
        }
    }
    Ok(rows)
}

/// Per-seed paired differences `adapted - baseline`, matched by position.
fn paired_diffs(
    baseline: &[MetricsReport],
    adapted: &[MetricsReport],
    metrics: &[Metric],
) -> Result<Vec<MetricsReport>> {
    if baseline.len() != adapted.len() {
        return Err(Error::invalid(format!(
            "{} baseline runs but {} adapted runs",
            baseline.len(),
            adapted.len()
        )));
    }
    baseline
        .iter()
        .zip(adapted)
        .map(|(b, a)| {
            let mut d = MetricsReport::default();
            for &m in metrics {
                d.set(m, a.get(m)? - b.get(m)?);
            }
            Ok(d)
        })
        .collect()
}

fn slice_rows(slices: &[SliceResults]) -> Result<Vec<Vec<Cell>>> {
    let metrics = &CLASSIFICATION;
    let mut base_slices: Vec<SliceResult> = Vec::new();
    let mut adapted_slices: Vec<SliceResult> = Vec::new();
    for s in slices {
        base_slices.push((s.ratio, s.n_train, mean_report(&s.baseline.runs, metrics)?));
        adapted_slices.push((s.ratio, s.n_train, mean_report(&s.adapted.runs, metrics)?));
    }
    let table = improvement_table(&base_slices, &adapted_slices, metrics)?;
    let mut rows = Vec::new();
    for (row, s) in table.rows.iter().zip(slices) {
        let pct = format!("{}%", ratio_percent(row.ratio));
        rows.push(labelled(
            &[&pct, &row.n_train.to_string(), &s.baseline.name],
            metric_cells(&row.baseline, metrics, Cell::Value)?,
        ));
        let (_, base_std) = aggregate(&s.baseline.runs, metrics)?;
        if let Some(std) = base_std {
            rows.push(labelled(&["", "", ""], metric_cells(&std, metrics, Cell::Spread)?));
        }
        rows.push(labelled(
            &["", "", "DAPT improvement"],
            metric_cells(&MetricsReport(row.diff.clone()), metrics, Cell::Signed)?,
        ));
        let diffs = paired_diffs(&s.baseline.runs, &s.adapted.runs, metrics)?;
        if let (_, Some(std)) = aggregate(&diffs, metrics)? {
            rows.push(labelled(&["", "", ""], metric_cells(&std, metrics, Cell::Spread)?));
        }
        let rel: Vec<Cell> = metrics
            .iter()
            .map(|m| match row.relative_pct.get(m).copied().flatten() {
                Some(v) => Cell::Relative(v),
                None => Cell::Missing,
            })
            .collect();
        rows.push(labelled(&["", "", "relative improvement(%)"], rel));
    }
    Ok(rows)
}

fn adapter_rows(pairs: &[AdapterResults]) -> Result<Vec<Vec<Cell>>> {
    let metrics = &CLASSIFICATION;
    let mut rows = Vec::new();
    for p in pairs {
        let (mean, std) = aggregate(&p.full.runs, metrics)?;
        rows.push(labelled(&[&p.full.name], metric_cells(&mean, metrics, Cell::Value)?));
        if let Some(std) = std {
            rows.push(labelled(&[""], metric_cells(&std, metrics, Cell::Spread)?));
        }
        let diffs = paired_diffs(&p.full.runs, &p.adapter.runs, metrics)?;
        let (mean_diff, std_diff) = aggregate(&diffs, metrics)?;
        rows.push(labelled(
            &["Adapter (diff)"],
            metric_cells(&mean_diff, metrics, Cell::Signed)?,
        ));
        if let Some(std) = std_diff {
            rows.push(labelled(&[""], metric_cells(&std, metrics, Cell::Spread)?));
        }
    }
    Ok(rows)
}

/// Lays `results` out in the requested table shape.
pub fn build_table(results: &Results, layout: Layout) -> Result<ResultsTable> {
    let (labels, rows): (&[&str], _) = match (layout, results) {
        (Layout::Classification | Layout::Retrieval, Results::Models(models)) => {
            (&["Model"], model_rows(models, layout)?)
        }
        (Layout::Ablation, Results::Slices(slices)) => {
            (&["Train data ratio", "Train samples", "Model"], slice_rows(slices)?)
        }
        (Layout::AdapterDiff, Results::AdapterPairs(pairs)) => (&["Model"], adapter_rows(pairs)?),
        _ => return Err(Error::Config(format!("results do not fit layout {layout:?}"))),
    };
    Ok(ResultsTable {
        layout,
        header: header(labels, layout.metrics()),
        rows,
    })
}

/// Builds, renders and writes a results table, returning the rendered text.
pub fn emit_results_table(results: &Results, layout: Layout, fmt: TableFormat, path: &Path) -> Result<String> {
    let text = build_table(results, layout)?.render(fmt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(text)
}
