//! Labelled function corpora: JSONL ingestion, validation, splits, stats, and
//! conversion from big_vul-style CSV exports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::segmenter::LineTokenizer;

/// One function with its function-level label and 1-based vulnerable lines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSample {
    pub id: String,
    pub code: String,
    pub label: u8,
    #[serde(default)]
    pub vul_lines: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<String>,
}

impl FunctionSample {
    pub fn line_count(&self) -> usize {
        self.code.lines().count()
    }

    pub fn is_vulnerable(&self) -> bool {
        self.label == 1
    }

    /// Checks label/line consistency; `vul_lines` is sorted and deduplicated.
    pub fn validate(&mut self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if self.label == 0 && !self.vul_lines.is_empty() {
            return Err("label 0 with non-empty vul_lines".into());
        }
        let lines = self.line_count();
        if let Some(&bad) = self.vul_lines.iter().find(|&&l| l == 0 || l > lines) {
            return Err(format!("vul_line {bad} outside 1..={lines}"));
        }
        self.vul_lines.sort_unstable();
        self.vul_lines.dedup();
        Ok(())
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<FunctionSample>> {
    read_corpus(text.as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<Vec<FunctionSample>> {
    read_corpus(BufReader::new(fs::File::open(path)?))
}

fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<FunctionSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: FunctionSample = serde_json::from_str(&line).map_err(|e| HlsError::Parse {
            line: no,
            msg: e.to_string(),
        })?;
        s.validate().map_err(|msg| HlsError::Validation {
            line: no,
            id: s.id.clone(),
            msg,
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn to_jsonl(samples: &[FunctionSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, samples: &[FunctionSample]) -> Result<()> {
    fs::File::create(path)?.write_all(to_jsonl(samples)?.as_bytes())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub evaluation: f64,
    pub test: f64,
    pub seed: u64,
    /// Shuffle and apportion each label class separately.
    #[serde(default)]
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            train: 0.8,
            evaluation: 0.1,
            test: 0.1,
            seed,
            stratified: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.evaluation, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(HlsError::Config(format!(
                "split fractions must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// `(train, evaluation, test)` sizes for `n` items: train is
    /// `floor(train·n)`, the rest is divided between evaluation and test in
    /// proportion, flooring evaluation and giving the remainder to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).floor() as usize).min(n);
        let rest = n - train;
        let held = self.evaluation + self.test;
        let eval = if held > 0.0 {
            ((self.evaluation / held * rest as f64).floor() as usize).min(rest)
        } else {
            0
        };
        (train, eval, rest - eval)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<FunctionSample>,
    pub evaluation: Vec<FunctionSample>,
    pub test: Vec<FunctionSample>,
}

/// Index partition of `0..n` as a pure function of the spec.
pub fn split_indices(labels: &[u8], spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        [0u8, 1]
            .iter()
            .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut out: [Vec<usize>; 3] = Default::default();
    for mut idx in groups {
        idx.shuffle(&mut rng);
        let (tr, ev, _) = spec.sizes(idx.len());
        out[0].extend_from_slice(&idx[..tr]);
        out[1].extend_from_slice(&idx[tr..tr + ev]);
        out[2].extend_from_slice(&idx[tr + ev..]);
    }
    Ok(out)
}

pub fn split(corpus: &[FunctionSample], spec: &SplitSpec) -> Result<Splits> {
    let labels: Vec<u8> = corpus.iter().map(|s| s.label).collect();
    let [tr, ev, te] = split_indices(&labels, spec)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| corpus[i].clone()).collect();
    Ok(Splits {
        train: pick(tr),
        evaluation: pick(ev),
        test: pick(te),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub total: usize,
    pub vulnerable: usize,
    pub non_vulnerable: usize,
    /// `vulnerable / total`, 0 for an empty corpus.
    pub ratio: f64,
}

pub fn class_stats(samples: &[FunctionSample]) -> ClassStats {
    let total = samples.len();
    let vulnerable = samples.iter().filter(|s| s.is_vulnerable()).count();
    ClassStats {
        total,
        vulnerable,
        non_vulnerable: total - vulnerable,
        ratio: if total == 0 { 0.0 } else { vulnerable as f64 / total as f64 },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub limit: usize,
    pub total: usize,
    pub untruncated: usize,
    pub vulnerable: usize,
    pub untruncated_vulnerable: usize,
}

/// Stream length of a function as the encoder sees it: `[CLS]` plus every
/// token of every line.
pub fn token_length<T: LineTokenizer + ?Sized>(code: &str, tokenizer: &T) -> usize {
    1 + code.lines().map(|l| tokenizer.tokenize_line(l).len()).sum::<usize>()
}

pub fn truncation_stats<T: LineTokenizer + ?Sized>(
    samples: &[FunctionSample],
    tokenizer: &T,
    limits: &[usize],
) -> Vec<TruncationRow> {
    let lens: Vec<(usize, bool)> = samples
        .iter()
        .map(|s| (token_length(&s.code, tokenizer), s.is_vulnerable()))
        .collect();
    limits
        .iter()
        .map(|&limit| TruncationRow {
            limit,
            total: lens.len(),
            untruncated: lens.iter().filter(|(n, _)| *n <= limit).count(),
            vulnerable: lens.iter().filter(|(_, v)| *v).count(),
            untruncated_vulnerable: lens.iter().filter(|(n, v)| *v && *n <= limit).count(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub classes: ClassStats,
    pub truncation: Vec<TruncationRow>,
}

impl CorpusStats {
    pub fn to_text(&self) -> String {
        let c = &self.classes;
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>10}", "total", c.total);
        let _ = writeln!(s, "{:<16}{:>10}", "vulnerable", c.vulnerable);
        let _ = writeln!(s, "{:<16}{:>10}", "non_vulnerable", c.non_vulnerable);
        let _ = writeln!(s, "{:<16}{:>10.4}", "ratio", c.ratio);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>8}{:>14}{:>14}{:>12}{:>12}", "limit", "untruncated", "untrunc_vul", "frac_all", "frac_vul");
        for r in &self.truncation {
            let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            let _ = writeln!(
                s,
                "{:>8}{:>14}{:>14}{:>12.4}{:>12.4}",
                r.limit,
                r.untruncated,
                r.untruncated_vulnerable,
                frac(r.untruncated, r.total),
                frac(r.untruncated_vulnerable, r.vulnerable)
            );
        }
        s
    }
}

/// Header names and rows of a CSV file; lines starting with `#` are skipped.
pub fn read_csv_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(false).from_path(path)?;
    let headers = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConversionReport {
    pub converted: usize,
    pub skipped: Vec<(usize, String)>,
}

/// Maps big_vul-style CSV records onto [`FunctionSample`]s.
///
/// Recognised columns: code from `func_before`; label from `vul` or
/// `target`; id from `index` or `id` (else the record number); vulnerable
/// lines from `flaw_line_index`, a comma-separated list of 0-based line
/// indices; `CWE ID` as the tag. Records that fail validation are skipped
/// and reported.
pub fn convert_bigvul_csv(path: &Path) -> Result<(Vec<FunctionSample>, ConversionReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let col = |names: &[&str]| names.iter().find_map(|n| headers.get(*n).copied());
    let code_col = col(&["func_before"]).ok_or_else(|| HlsError::Parse {
        line: 1,
        msg: "missing func_before column".into(),
    })?;
    let label_col = col(&["vul", "target"]).ok_or_else(|| HlsError::Parse {
        line: 1,
        msg: "missing vul/target column".into(),
    })?;
    let id_col = col(&["index", "id", ""]);
    let lines_col = col(&["flaw_line_index"]);
    let cwe_col = col(&["CWE ID", "cwe"]);

    let mut samples = Vec::new();
    let mut report = ConversionReport::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let record_no = i + 1;
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).map(str::trim).filter(|s| !s.is_empty());
        let parsed = (|| -> std::result::Result<FunctionSample, String> {
            let label: u8 = field(Some(label_col))
                .ok_or("empty label")?
                .parse::<f64>()
                .map_err(|e| e.to_string())? as u8;
            let mut vul_lines = Vec::new();
            if label == 1 {
                if let Some(list) = field(lines_col) {
                    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                        let idx: usize = part.parse::<f64>().map_err(|e| e.to_string())? as usize;
                        vul_lines.push(idx + 1);
                    }
                }
            }
            let mut s = FunctionSample {
                id: field(id_col).map_or_else(|| record_no.to_string(), str::to_string),
                code: rec.get(code_col).unwrap_or_default().to_string(),
                label,
                vul_lines,
                cwe: field(cwe_col).map(str::to_string),
            };
            s.validate()?;
            Ok(s)
        })();
        match parsed {
            Ok(s) => samples.push(s),
            Err(msg) => {
                log::warn!("big_vul record {record_no} skipped: {msg}");
                report.skipped.push((record_no, msg));
            }
        }
    }
    report.converted = samples.len();
    Ok((samples, report))
}
