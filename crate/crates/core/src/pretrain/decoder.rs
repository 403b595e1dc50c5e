use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::MspMaskPlan;
use crate::error::{HlsError, Result};
use crate::hls_model::HlsModel;
use crate::scalar::Scalar;
use crate::segmenter::{EncodedSample, BOS, EOS, PAD};
use crate::te_encoder::INIT_STD;
use crate::tensor::{impl_parameters, Graph, Tensor, Var};

pub const MAX_DECODE_LEN: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MspReduction {
    /// Sum over statements and tokens, averaged over the samples of a batch.
    #[default]
    Sum,
    /// Sum divided by the number of predicted tokens.
    TokenMean,
}

impl fmt::Display for MspReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MspReduction::Sum => "sum",
            MspReduction::TokenMean => "token_mean",
        })
    }
}

impl FromStr for MspReduction {
    type Err = HlsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(MspReduction::Sum),
            "token_mean" => Ok(MspReduction::TokenMean),
            other => Err(HlsError::Config(format!("unknown MSP reduction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MspConfig {
    pub max_decode_len: usize,
    #[serde(default)]
    pub reduction: MspReduction,
    /// Also feed the statement vector into every decoder step.
    #[serde(default)]
    pub feed_statement: bool,
}

impl Default for MspConfig {
    fn default() -> Self {
        MspConfig {
            max_decode_len: MAX_DECODE_LEN,
            reduction: MspReduction::Sum,
            feed_statement: false,
        }
    }
}

/// Single-layer LSTM that reconstructs a statement's tokens from its
/// statement vector. Gate columns are ordered input, forget, cell, output.
/// Input embeddings are the token encoder's table, passed in at call time.
#[derive(Clone, Debug)]
pub struct MspDecoder<S> {
    pub input: Tensor<S>,
    pub recurrent: Tensor<S>,
    pub bias: Tensor<S>,
    pub context: Option<Tensor<S>>,
    pub out: Tensor<S>,
    pub out_bias: Tensor<S>,
}

impl_parameters!(MspDecoder {
    input,
    recurrent,
    bias,
    context,
    out,
    out_bias
});

impl<S: Scalar> MspDecoder<S> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, vocab_size: usize, feed_statement: bool, rng: &mut R) -> Self {
        let d = hidden;
        MspDecoder {
            input: Tensor::randn(&[d, 4 * d], INIT_STD, rng).trainable(),
            recurrent: Tensor::randn(&[d, 4 * d], INIT_STD, rng).trainable(),
            bias: Tensor::zeros(&[4 * d]).trainable(),
            context: feed_statement.then(|| Tensor::randn(&[d, 4 * d], INIT_STD, rng).trainable()),
            out: Tensor::randn(&[d, vocab_size], INIT_STD, rng).trainable(),
            out_bias: Tensor::zeros(&[vocab_size]).trainable(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.input.rows()
    }

    /// Summed natural-log cross-entropy of teacher-forced decoding. Row `b`
    /// of `init` (`[B × d]`) is the initial hidden state for `targets[b]`;
    /// the inputs are `[BOS] t_1 … t_m` and the predictions `t_1 … t_m [EOS]`.
    pub fn teacher_forced_loss(&self, g: &mut Graph<S>, embedding: &Tensor<S>, init: Var, targets: &[Vec<usize>]) -> Result<Var> {
        let d = self.hidden();
        let b = targets.len();
        if g.shape(init) != [b, d] {
            return Err(HlsError::dims("msp_decoder", g.shape(init), &[b, d]));
        }
        if b == 0 {
            return Ok(g.constant(Tensor::scalar(S::zero())));
        }
        let emb = g.param(embedding);
        let wx = g.param(&self.input);
        let wh = g.param(&self.recurrent);
        let bias = g.param(&self.bias);
        let wo = g.param(&self.out);
        let bo = g.param(&self.out_bias);
        let ctx = match &self.context {
            Some(c) => {
                let wc = g.param(c);
                Some(g.matmul(init, wc)?)
            }
            None => None,
        };
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut h = init;
        let mut c = g.constant(Tensor::zeros(&[b, d]));
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let inputs: Vec<usize> = targets
                .iter()
                .map(|seq| match t {
                    0 => BOS,
                    _ => seq.get(t - 1).copied().unwrap_or(PAD),
                })
                .collect();
            let (outs, weights): (Vec<usize>, Vec<S>) = targets
                .iter()
                .map(|seq| match t.cmp(&seq.len()) {
                    std::cmp::Ordering::Less => (seq[t], S::one()),
                    std::cmp::Ordering::Equal => (EOS, S::one()),
                    std::cmp::Ordering::Greater => (PAD, S::zero()),
                })
                .unzip();
            let x = g.embedding_lookup(emb, &inputs)?;
            let zx = g.matmul(x, wx)?;
            let zh = g.matmul(h, wh)?;
            let mut z = g.add(zx, zh)?;
            if let Some(cv) = ctx {
                z = g.add(z, cv)?;
            }
            let z = g.add_row(z, bias)?;
            let gi = g.slice_cols(z, 0, d)?;
            let gf = g.slice_cols(z, d, d)?;
            let gg = g.slice_cols(z, 2 * d, d)?;
            let go = g.slice_cols(z, 3 * d, d)?;
            let i = g.sigmoid(gi);
            let f = g.sigmoid(gf);
            let cand = g.tanh(gg);
            let o = g.sigmoid(go);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            let logits = g.matmul(h, wo)?;
            let logits = g.add_row(logits, bo)?;
            let ce = g.cross_entropy_rows(logits, &outs)?;
            let step = g.weighted_sum(ce, &weights)?;
            total = Some(match total {
                Some(acc) => g.add(acc, step)?,
                None => step,
            });
        }
        Ok(total.expect("at least one step"))
    }
}

/// Graph nodes and counts of an MSP batch.
#[derive(Clone, Copy, Debug)]
pub struct MspBatchLoss {
    /// The reduced training objective.
    pub loss: Var,
    /// Unreduced sum over every selected statement of every sample.
    pub total: Var,
    /// Predicted tokens including one [EOS] per statement.
    pub tokens: usize,
    pub statements: usize,
    pub truncated: usize,
}

/// Masked-statement prediction over a batch. `masked[i]` must be
/// `apply_mask_plan(x_i, plans[i])`; targets are taken from the plans.
pub fn msp_loss_batch<S: Scalar>(
    g: &mut Graph<S>,
    masked: &[&EncodedSample],
    plans: &[&MspMaskPlan],
    model: &HlsModel<S>,
    decoder: &MspDecoder<S>,
    cfg: &MspConfig,
) -> Result<MspBatchLoss> {
    if masked.len() != plans.len() {
        return Err(HlsError::dims("msp_loss", &[masked.len()], &[plans.len()]));
    }
    if masked.is_empty() {
        return Err(HlsError::shape("msp_loss", "empty batch"));
    }
    let enc = model.forward(g, masked)?;
    let mut inits = Vec::new();
    let mut targets = Vec::new();
    let mut truncated = 0;
    for (vars, plan) in enc.iter().zip(plans) {
        let lines = plan.selected_lines();
        if lines.is_empty() {
            continue;
        }
        inits.push(g.gather_rows(vars.statements, &lines)?);
        for m in &plan.lines {
            let mut t = m.original.clone();
            if t.len() > cfg.max_decode_len {
                t.truncate(cfg.max_decode_len);
                truncated += 1;
            }
            targets.push(t);
        }
    }
    if truncated > 0 {
        log::warn!("{truncated} masked statements truncated to {} tokens", cfg.max_decode_len);
    }
    let tokens: usize = targets.iter().map(|t| t.len() + 1).sum();
    let init = match inits.len() {
        0 => g.constant(Tensor::zeros(&[0, decoder.hidden()])),
        1 => inits[0],
        _ => g.concat_rows(&inits)?,
    };
    let total = decoder.teacher_forced_loss(g, &model.te.token_embedding, init, &targets)?;
    let denom = match cfg.reduction {
        MspReduction::Sum => masked.len(),
        MspReduction::TokenMean => tokens.max(1),
    };
    let loss = g.scale(total, S::one() / S::from_usize(denom).expect("count"));
    Ok(MspBatchLoss {
        loss,
        total,
        tokens,
        statements: targets.len(),
        truncated,
    })
}

/// `L_MSP` of one sample: the summed negative log-likelihood of every
/// selected statement's tokens (per token under `TokenMean`).
pub fn msp_loss<S: Scalar>(
    g: &mut Graph<S>,
    masked: &EncodedSample,
    plan: &MspMaskPlan,
    model: &HlsModel<S>,
    decoder: &MspDecoder<S>,
    cfg: &MspConfig,
) -> Result<Var> {
    Ok(msp_loss_batch(g, &[masked], &[plan], model, decoder, cfg)?.loss)
}
