//! Detection and localisation metrics, Top-k% curves, and line heatmaps.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_pairs<I: IntoIterator<Item = (bool, bool)>>(pairs: I) -> Self {
        let mut c = ConfusionCounts::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub undefined: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

/// Precision, recall (`1 − FNR`), accuracy and
/// `F1 = 2·P·(1−FNR) / (P + (1−FNR))`.
pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let mut undefined = Vec::new();
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let accuracy = ratio(tp + tn, tp + fp + tn + fn_, "accuracy", &mut undefined);
    let precision = ratio(tp, tp + fp, "precision", &mut undefined);
    let fnr = ratio(fn_, tp + fn_, "recall", &mut undefined);
    let recall = if undefined.iter().any(|u| u == "recall") { 0.0 } else { 1.0 - fnr };
    let f1 = ratio(2.0 * precision * recall, precision + recall, "f1", &mut undefined);
    ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        undefined,
    }
}

/// Ground truth and ranking for one vulnerable sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub id: String,
    /// `r_i`: original line numbers labelled vulnerable.
    pub vulnerable_lines: Vec<usize>,
    /// Line numbers, most suspicious first; empty when no ranking was made.
    pub ranked_lines: Vec<usize>,
    /// Retained line count `L_i`.
    pub num_lines: usize,
}

/// `max(1, ceil(k·L/100))`, never more than `L`.
pub fn topk_count(num_lines: usize, k: f64) -> usize {
    let raw = (k * num_lines as f64 / 100.0).ceil();
    (raw as usize).max(1).min(num_lines.max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkResult {
    pub k: f64,
    pub accuracy: f64,
    /// Records contributing to the mean.
    pub counted: usize,
    /// Records dropped because their `r_i` is empty.
    pub excluded: usize,
}

fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(HlsError::Config(format!("k must lie in (0, 100], got {k}")));
    }
    Ok(())
}

/// Fraction of records whose first `topk_count(L_i, k)` ranked lines hit
/// `r_i`.
pub fn topk_accuracy(records: &[LocalizationRecord], k: f64) -> Result<TopkResult> {
    check_k(k)?;
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for r in records {
        if r.vulnerable_lines.is_empty() {
            excluded += 1;
            continue;
        }
        counted += 1;
        let truth: BTreeSet<usize> = r.vulnerable_lines.iter().copied().collect();
        let take = topk_count(r.num_lines, k);
        if r.ranked_lines.iter().take(take).any(|l| truth.contains(l)) {
            hits += 1;
        }
    }
    if excluded > 0 {
        log::warn!("top-k: {excluded} records without labelled lines excluded");
    }
    Ok(TopkResult {
        k,
        accuracy: if counted == 0 { 0.0 } else { hits as f64 / counted as f64 },
        counted,
        excluded,
    })
}

pub const DEFAULT_SWEEP: [f64; 19] = [
    2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0, 19.0, 20.0,
];

pub fn sweep_topk(records: &[LocalizationRecord], ks: &[f64]) -> Result<Vec<TopkResult>> {
    ks.iter().map(|&k| topk_accuracy(records, k)).collect()
}

pub fn topk_curve_csv(curve: &[TopkResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "accuracy"])?;
    for p in curve {
        w.write_record([format!("{}", p.k), format!("{:?}", p.accuracy)])?;
    }
    let bytes = w.into_inner().map_err(|e| HlsError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Which vulnerable samples enter the Top-k% mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopkPopulation {
    /// Every ground-truth vulnerable sample with a labelled retained line;
    /// coarse misses count as failures.
    #[default]
    AllVulnerable,
    /// Only those the coarse head also predicted vulnerable.
    CoarsePositive,
}

impl fmt::Display for TopkPopulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopkPopulation::AllVulnerable => "all_vulnerable",
            TopkPopulation::CoarsePositive => "coarse_positive",
        })
    }
}

impl FromStr for TopkPopulation {
    type Err = HlsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_vulnerable" | "all" => Ok(TopkPopulation::AllVulnerable),
            "coarse_positive" | "detected" => Ok(TopkPopulation::CoarsePositive),
            other => Err(HlsError::Config(format!("unknown top-k population {other:?}"))),
        }
    }
}

/// One statement's score in a [`PredictionReport`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatementScore {
    pub line: usize,
    pub p_vul: f64,
}

/// Staged prediction for one sample. `statements` is ranked (most
/// suspicious first) and is empty unless `coarse_label` is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub id: String,
    pub p_vul: f64,
    pub coarse_label: u8,
    pub num_lines: usize,
    /// Original line numbers of the retained lines, in source order.
    pub retained_lines: Vec<usize>,
    pub statements: Vec<StatementScore>,
    /// The first `topk_count(L, k)` ranked lines for the requested `k`.
    pub top_k_lines: Vec<usize>,
}

impl PredictionReport {
    pub fn ranked_lines(&self) -> Vec<usize> {
        self.statements.iter().map(|s| s.line).collect()
    }
}

/// Pairs reports with ground truth (`truth[i]` = label and vulnerable line
/// numbers of report `i`) and selects the Top-k% population.
pub fn localization_records(
    reports: &[PredictionReport],
    truth: &[(u8, Vec<usize>)],
    population: TopkPopulation,
) -> Result<Vec<LocalizationRecord>> {
    if reports.len() != truth.len() {
        return Err(HlsError::dims("localization_records", &[reports.len()], &[truth.len()]));
    }
    Ok(reports
        .iter()
        .zip(truth)
        .filter(|(r, (label, _))| *label == 1 && (population == TopkPopulation::AllVulnerable || r.coarse_label == 1))
        .map(|(r, (_, lines))| LocalizationRecord {
            id: r.id.clone(),
            vulnerable_lines: lines.clone(),
            ranked_lines: r.ranked_lines(),
            num_lines: r.num_lines,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub counts: ConfusionCounts,
    pub classification: ClassificationMetrics,
    pub topk_population: TopkPopulation,
    pub topk: Vec<TopkResult>,
}

/// Everything the evaluate command reports, recomputable from the reports
/// and ground truth alone.
pub fn evaluate_reports(
    reports: &[PredictionReport],
    truth: &[(u8, Vec<usize>)],
    ks: &[f64],
    population: TopkPopulation,
) -> Result<MetricsReport> {
    let counts = ConfusionCounts::from_pairs(reports.iter().zip(truth).map(|(r, t)| (r.coarse_label == 1, t.0 == 1)));
    let records = localization_records(reports, truth, population)?;
    Ok(MetricsReport {
        samples: reports.len(),
        classification: classification_metrics(&counts),
        counts,
        topk_population: population,
        topk: sweep_topk(&records, ks)?,
    })
}

pub const COARSE_NEGATIVE_NOTE: &str = "coarse-negative; ranking suppressed";

/// Heatmap CSV with one row per retained line in source order:
/// `line_number,source_text,p_vul,rank`. For a coarse-negative report the
/// scores are left empty and a `#` comment line carries the note.
pub fn export_heatmap(report: &PredictionReport, code: &str) -> Result<String> {
    let source: Vec<&str> = code.lines().collect();
    let mut out = Vec::new();
    if report.coarse_label == 0 {
        out.extend_from_slice(format!("# {COARSE_NEGATIVE_NOTE}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["line_number", "source_text", "p_vul", "rank"])?;
    for &line in &report.retained_lines {
        let text = source.get(line.wrapping_sub(1)).copied().unwrap_or("");
        let (p, rank) = match report.statements.iter().position(|s| s.line == line) {
            Some(r) => (format!("{:?}", report.statements[r].p_vul), (r + 1).to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([line.to_string(), text.to_string(), p, rank])?;
    }
    let bytes = w.into_inner().map_err(|e| HlsError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
