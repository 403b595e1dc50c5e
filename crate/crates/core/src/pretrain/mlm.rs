use rand::Rng;

use super::mask::MlmPlan;
use crate::error::{HlsError, Result};
use crate::scalar::Scalar;
use crate::segmenter::EncodedSample;
use crate::te_encoder::{EncoderConfig, TeWeights, INIT_STD};
use crate::tensor::{impl_parameters, Graph, Tensor, Var};

/// Two-layer feed-forward token classifier over token-encoder outputs.
#[derive(Clone, Debug)]
pub struct MlmHead<S> {
    pub dense: Tensor<S>,
    pub dense_bias: Tensor<S>,
    pub out: Tensor<S>,
    pub out_bias: Tensor<S>,
}

impl_parameters!(MlmHead {
    dense,
    dense_bias,
    out,
    out_bias
});

impl<S: Scalar> MlmHead<S> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, vocab_size: usize, rng: &mut R) -> Self {
        MlmHead {
            dense: Tensor::randn(&[hidden, hidden], INIT_STD, rng).trainable(),
            dense_bias: Tensor::zeros(&[hidden]).trainable(),
            out: Tensor::randn(&[hidden, vocab_size], INIT_STD, rng).trainable(),
            out_bias: Tensor::zeros(&[vocab_size]).trainable(),
        }
    }

    pub fn logits(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w1 = g.param(&self.dense);
        let b1 = g.param(&self.dense_bias);
        let w2 = g.param(&self.out);
        let b2 = g.param(&self.out_bias);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

/// Mean cross-entropy at the masked positions of a batch, computed from the
/// token encoder alone. Returns the loss node and the number of positions;
/// with no positions the loss is a constant zero.
pub fn mlm_loss_batch<S: Scalar>(
    g: &mut Graph<S>,
    masked: &[&EncodedSample],
    plans: &[&MlmPlan],
    te: &TeWeights<S>,
    cfg: &EncoderConfig,
    head: &MlmHead<S>,
) -> Result<(Var, usize)> {
    if masked.len() != plans.len() {
        return Err(HlsError::dims("mlm_loss", &[masked.len()], &[plans.len()]));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for (enc, plan) in masked.iter().zip(plans) {
        rows.extend(plan.positions.iter().map(|&p| offset + p));
        targets.extend_from_slice(&plan.originals);
        offset += enc.n();
    }
    if rows.is_empty() {
        return Ok((g.constant(Tensor::scalar(S::zero())), 0));
    }
    let segments: Vec<&[usize]> = masked
        .iter()
        .flat_map(|s| s.segment_boundaries.iter().map(|&(a, b)| &s.token_ids[a..b]))
        .collect();
    let tokens = te.forward(g, &segments, None, cfg, None)?;
    let picked = g.gather_rows(tokens, &rows)?;
    let logits = head.logits(g, picked)?;
    Ok((g.cross_entropy(logits, &targets, None)?, rows.len()))
}

pub fn mlm_loss<S: Scalar>(
    g: &mut Graph<S>,
    masked: &EncodedSample,
    plan: &MlmPlan,
    te: &TeWeights<S>,
    cfg: &EncoderConfig,
    head: &MlmHead<S>,
) -> Result<Var> {
    Ok(mlm_loss_batch(g, &[masked], &[plan], te, cfg, head)?.0)
}
