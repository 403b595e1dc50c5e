use serde::{Deserialize, Serialize};

use super::tokenizer::LineTokenizer;
use super::vocab::{Vocab, CLS};
use crate::corpus::FunctionSample;
use crate::error::{HlsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Token capacity of one token-encoder input.
pub const SEGMENT_LEN: usize = 512;
/// Statement capacity of the statement encoder.
pub const MAX_STATEMENTS: usize = 512;

/// A tokenized function: `[CLS]` at index 0, then the tokens of each
/// retained non-blank line. Line `i` owns tokens `line_spans[i].0 ..
/// line_spans[i].1`; the spans tile `1..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub line_spans: Vec<(usize, usize)>,
    /// Original 1-based source line number of each retained line.
    pub line_numbers: Vec<usize>,
    pub label: u8,
    /// Fine-grained label per retained line.
    pub line_labels: Vec<bool>,
    pub segment_boundaries: Vec<(usize, usize)>,
    /// Whether any token or line was cut by the length caps.
    pub truncated: bool,
}

impl EncodedSample {
    pub fn n(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_lines(&self) -> usize {
        self.line_spans.len()
    }

    pub fn line_tokens(&self, i: usize) -> &[usize] {
        let (s, e) = self.line_spans[i];
        &self.token_ids[s..e]
    }

    /// Original line numbers of retained lines labelled vulnerable.
    pub fn vulnerable_lines(&self) -> Vec<usize> {
        self.line_numbers
            .iter()
            .zip(&self.line_labels)
            .filter(|(_, &v)| v)
            .map(|(&l, _)| l)
            .collect()
    }
}

pub fn check_m_len(m_len: usize) -> Result<()> {
    if m_len == 0 || m_len % SEGMENT_LEN != 0 {
        return Err(HlsError::Config(format!(
            "m_len must be a positive multiple of {SEGMENT_LEN}, got {m_len}"
        )));
    }
    Ok(())
}

/// Tokenizes `sample` line by line and applies the length caps: the whole
/// stream (with `[CLS]`) is cut to `m_len` tokens, a line cut mid-way keeps
/// its partial span, and at most [`MAX_STATEMENTS`] lines are retained.
pub fn encode<T: LineTokenizer + ?Sized>(
    sample: &FunctionSample,
    vocab: &Vocab,
    tokenizer: &T,
    m_len: usize,
) -> Result<EncodedSample> {
    check_m_len(m_len)?;
    let mut token_ids = vec![CLS];
    let mut line_spans = Vec::new();
    let mut line_numbers = Vec::new();
    let mut line_labels = Vec::new();
    let mut truncated = false;
    let mut any_line = false;
    for (idx, line) in sample.code.lines().enumerate() {
        let toks = tokenizer.tokenize_line(line);
        if toks.is_empty() {
            continue;
        }
        any_line = true;
        if token_ids.len() >= m_len || line_spans.len() >= MAX_STATEMENTS {
            truncated = true;
            break;
        }
        let start = token_ids.len();
        let room = m_len - start;
        if toks.len() > room {
            truncated = true;
        }
        token_ids.extend(toks.iter().take(room).map(|t| vocab.id(t)));
        line_spans.push((start, token_ids.len()));
        let number = idx + 1;
        line_numbers.push(number);
        line_labels.push(sample.vul_lines.contains(&number));
    }
    if !any_line {
        return Err(HlsError::EmptyFunction(sample.id.clone()));
    }
    let segment_boundaries = segment_ranges(token_ids.len());
    Ok(EncodedSample {
        id: sample.id.clone(),
        token_ids,
        line_spans,
        line_numbers,
        label: sample.label,
        line_labels,
        segment_boundaries,
        truncated,
    })
}

/// `ceil(n / 512)` consecutive ranges; all but the last are full.
pub fn segment_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(SEGMENT_LEN))
        .map(|i| (i * SEGMENT_LEN, ((i + 1) * SEGMENT_LEN).min(n)))
        .collect()
}

/// Token-id slices of each segment of `encoded`, in order.
pub fn segment(encoded: &EncodedSample) -> Vec<&[usize]> {
    encoded
        .segment_boundaries
        .iter()
        .map(|&(s, e)| &encoded.token_ids[s..e])
        .collect()
}

/// Row `i` of the result is the mean of the rows of `tokens` inside span `i`,
/// i.e. the row-normalized correspondence matrix applied to `tokens`.
pub fn correspondence_apply<S: Scalar>(line_spans: &[(usize, usize)], tokens: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let s = g.span_mean(t, line_spans)?;
    Ok(g.tensor(s))
}

/// Retained lines rendered back to text, tokens joined by single spaces.
pub fn detokenize(encoded: &EncodedSample, vocab: &Vocab) -> String {
    encoded
        .line_spans
        .iter()
        .map(|&(s, e)| {
            encoded.token_ids[s..e]
                .iter()
                .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
