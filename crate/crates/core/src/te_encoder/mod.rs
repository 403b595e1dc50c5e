//! Token-level transformer encoder over segments of at most 512 tokens.

mod layer;

use rand::Rng;

use crate::error::{HlsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{impl_parameters, Graph, Tensor, Var};

pub use layer::{EncoderConfig, EncoderLayer, LayerStack, INIT_STD, LN_EPS, MAX_POSITIONS};

/// Embedding tables plus the layer stack of the token encoder.
#[derive(Clone, Debug)]
pub struct TeWeights<S> {
    pub token_embedding: Tensor<S>,
    pub position_embedding: Tensor<S>,
    pub stack: LayerStack<S>,
}

impl_parameters!(TeWeights {
    token_embedding,
    position_embedding,
    stack
});

impl<S: Scalar> TeWeights<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        TeWeights {
            token_embedding: Tensor::randn(&[cfg.vocab_size, cfg.hidden], INIT_STD, rng).trainable(),
            position_embedding: Tensor::randn(&[cfg.max_positions, cfg.hidden], INIT_STD, rng).trainable(),
            stack: LayerStack::new(cfg, rng),
        }
    }

    /// Encodes independent segments in one pass. Rows of the result follow
    /// the segments in order; positions restart at 0 in every segment.
    /// `keep` (one flag per row of the result) marks non-padding tokens.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        segments: &[&[usize]],
        keep: Option<&[bool]>,
        cfg: &EncoderConfig,
        maps: Option<&mut Vec<Vec<Var>>>,
    ) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut blocks = Vec::with_capacity(segments.len());
        for seg in segments {
            if seg.is_empty() {
                return Err(HlsError::shape("te_forward", "empty segment"));
            }
            if seg.len() > MAX_POSITIONS {
                return Err(HlsError::Capacity {
                    len: seg.len(),
                    max: MAX_POSITIONS,
                });
            }
            if let Some(&bad) = seg.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(HlsError::Vocabulary {
                    id: bad,
                    size: cfg.vocab_size,
                });
            }
            blocks.push((ids.len(), ids.len() + seg.len()));
            ids.extend_from_slice(seg);
            positions.extend(0..seg.len());
        }
        if ids.is_empty() {
            return Err(HlsError::shape("te_forward", "no segments"));
        }
        let tok = g.param(&self.token_embedding);
        let pos = g.param(&self.position_embedding);
        let te = g.embedding_lookup(tok, &ids)?;
        let pe = g.gather_rows(pos, &positions)?;
        let h0 = g.add(te, pe)?;
        let h0 = g.dropout(h0, cfg.dropout)?;
        let out = self.stack.forward(g, h0, &blocks, keep, cfg, maps)?;
        match keep {
            Some(k) => g.mask_rows(out, k),
            None => Ok(out),
        }
    }
}

/// Contextual token vectors `[len × d_h]` for one segment. `padding[i]`
/// marks position `i` as padding: it is never attended to and its output row
/// is zero.
pub fn te_forward<S: Scalar>(
    ids: &[usize],
    padding: Option<&[bool]>,
    weights: &TeWeights<S>,
    cfg: &EncoderConfig,
) -> Result<Tensor<S>> {
    let keep: Option<Vec<bool>> = padding
        .map(|p| {
            if p.len() != ids.len() {
                return Err(HlsError::dims("te_forward", &[ids.len()], &[p.len()]));
            }
            Ok(p.iter().map(|&x| !x).collect())
        })
        .transpose()?;
    let mut g = Graph::new();
    let out = weights.forward(&mut g, &[ids], keep.as_deref(), cfg, None)?;
    Ok(g.tensor(out))
}

/// Post-softmax attention weights `[len × len]`, indexed `[layer][head]`.
pub fn attention_maps<S: Scalar>(ids: &[usize], weights: &TeWeights<S>, cfg: &EncoderConfig) -> Result<Vec<Vec<Tensor<S>>>> {
    let mut g = Graph::new();
    let mut maps = Vec::new();
    weights.forward(&mut g, &[ids], None, cfg, Some(&mut maps))?;
    Ok(maps
        .into_iter()
        .map(|layer| layer.into_iter().map(|v| g.tensor(v)).collect())
        .collect())
}
