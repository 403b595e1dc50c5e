//! Token vectors to initial statement vectors: plain, learned-weight, and
//! [CLS]-attention averages within each line span.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::scalar::{lit, Scalar};
use crate::te_encoder::INIT_STD;
use crate::tensor::{impl_parameters, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum T2SKind {
    #[default]
    Average,
    Weighted,
    Attention,
}

impl fmt::Display for T2SKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            T2SKind::Average => "average",
            T2SKind::Weighted => "weighted",
            T2SKind::Attention => "attention",
        })
    }
}

impl FromStr for T2SKind {
    type Err = HlsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(T2SKind::Average),
            "weighted" => Ok(T2SKind::Weighted),
            "attention" => Ok(T2SKind::Attention),
            other => Err(HlsError::Config(format!(
                "unknown t2s strategy {other:?} (expected average, weighted or attention)"
            ))),
        }
    }
}

/// The configured strategy and its parameters. Only the active kind owns
/// tensors: `token_weights` is `[m_len × 1]`, `query`/`key` are `[d_h × d_a]`.
#[derive(Clone, Debug)]
pub struct Token2Statement<S> {
    pub kind: T2SKind,
    pub token_weights: Option<Tensor<S>>,
    pub query: Option<Tensor<S>>,
    pub key: Option<Tensor<S>>,
}

impl_parameters!(Token2Statement {
    token_weights,
    query,
    key
});

impl<S: Scalar> Token2Statement<S> {
    pub fn new<R: Rng + ?Sized>(kind: T2SKind, hidden: usize, m_len: usize, rng: &mut R) -> Self {
        let mut t = Token2Statement {
            kind,
            token_weights: None,
            query: None,
            key: None,
        };
        match kind {
            T2SKind::Average => {}
            T2SKind::Weighted => t.token_weights = Some(Tensor::zeros(&[m_len, 1]).trainable()),
            T2SKind::Attention => {
                t.query = Some(Tensor::randn(&[hidden, hidden], INIT_STD, rng).trainable());
                t.key = Some(Tensor::randn(&[hidden, hidden], INIT_STD, rng).trainable());
            }
        }
        t
    }

    /// `tokens` is the merged `[n × d_h]` matrix of one sample with the
    /// global [CLS] in row 0.
    pub fn forward(&self, g: &mut Graph<S>, tokens: Var, spans: &[(usize, usize)]) -> Result<Var> {
        match self.kind {
            T2SKind::Average => g.span_mean(tokens, spans),
            T2SKind::Weighted => {
                let w = self.token_weights.as_ref().ok_or_else(|| missing("token_weights"))?;
                let n = g.shape(tokens)[0];
                if n > w.rows() {
                    return Err(HlsError::Capacity { len: n, max: w.rows() });
                }
                let w = g.param(w);
                let w = g.slice_rows(w, 0, n)?;
                g.span_softmax_pool(tokens, w, spans)
            }
            T2SKind::Attention => {
                let q = self.query.as_ref().ok_or_else(|| missing("query"))?;
                let k = self.key.as_ref().ok_or_else(|| missing("key"))?;
                let scale: S = lit(1.0 / (k.cols() as f64).sqrt());
                let (q, k) = (g.param(q), g.param(k));
                let cls = g.slice_rows(tokens, 0, 1)?;
                let qv = g.matmul(cls, q)?;
                let kv = g.matmul(tokens, k)?;
                let qt = g.transpose(qv)?;
                let scores = g.matmul(kv, qt)?;
                let scores = g.scale(scores, scale);
                g.span_softmax_pool(tokens, scores, spans)
            }
        }
    }
}

fn missing(name: &str) -> HlsError {
    HlsError::Config(format!("token2statement parameter {name} is absent"))
}

/// Mean of the token vectors of each span.
pub fn t2s_average<S: Scalar>(tokens: &Tensor<S>, spans: &[(usize, usize)]) -> Result<Tensor<S>> {
    crate::segmenter::correspondence_apply(spans, tokens)
}

/// Per-span softmax of `weights[j]` as convex weights over token rows `j`.
pub fn t2s_weighted<S: Scalar>(tokens: &Tensor<S>, spans: &[(usize, usize)], weights: &[S]) -> Result<Tensor<S>> {
    let n = tokens.rows();
    if weights.len() < n {
        return Err(HlsError::dims("t2s_weighted", tokens.shape(), &[weights.len()]));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let w = g.constant(Tensor::new(&[n, 1], weights[..n].to_vec())?);
    let out = g.span_softmax_pool(x, w, spans)?;
    Ok(g.tensor(out))
}

/// Scores `(w_0·Q̂)·(w_j·K̂)/√d_a` against the [CLS] row 0, normalised within
/// each span.
pub fn t2s_attention<S: Scalar>(
    tokens: &Tensor<S>,
    spans: &[(usize, usize)],
    query: &Tensor<S>,
    key: &Tensor<S>,
) -> Result<Tensor<S>> {
    let t = Token2Statement {
        kind: T2SKind::Attention,
        token_weights: None,
        query: Some(query.clone()),
        key: Some(key.clone()),
    };
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let out = t.forward(&mut g, x, spans)?;
    Ok(g.tensor(out))
}
