//! Statement-level transformer producing final statement vectors and a
//! whole-program vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::scalar::Scalar;
use crate::te_encoder::{EncoderConfig, LayerStack, INIT_STD, MAX_POSITIONS};
use crate::tensor::{impl_parameters, Graph, Tensor, Var};

/// How the program vector is read off the statement encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProgramPooling {
    /// Output row of the prepended learnable summary row.
    #[default]
    Summary,
    /// Mean of the (unpadded) statement output rows.
    Mean,
}

impl fmt::Display for ProgramPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProgramPooling::Summary => "summary",
            ProgramPooling::Mean => "mean",
        })
    }
}

impl FromStr for ProgramPooling {
    type Err = HlsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(ProgramPooling::Summary),
            "mean" => Ok(ProgramPooling::Mean),
            other => Err(HlsError::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeWeights<S> {
    pub position_embedding: Tensor<S>,
    pub summary: Tensor<S>,
    pub stack: LayerStack<S>,
}

impl_parameters!(SeWeights {
    position_embedding,
    summary,
    stack
});

/// One sample's statement-encoder outputs as graph nodes: `program` is
/// `[1 × d_h]`, `statements` is `[L × d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct SeOutput {
    pub program: Var,
    pub statements: Var,
}

impl<S: Scalar> SeWeights<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        SeWeights {
            position_embedding: Tensor::randn(&[cfg.max_positions, cfg.hidden], INIT_STD, rng).trainable(),
            summary: Tensor::randn(&[1, cfg.hidden], INIT_STD, rng).trainable(),
            stack: LayerStack::new(cfg, rng),
        }
    }

    /// Encodes several programs in one pass; attention stays within each
    /// program. `padding[i]`, when given, flags padded statement rows of
    /// input `i`; they are not attended to and their outputs are zero.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        inputs: &[Var],
        padding: Option<&[&[bool]]>,
        cfg: &EncoderConfig,
        pooling: ProgramPooling,
    ) -> Result<Vec<SeOutput>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(p) = padding {
            if p.len() != inputs.len() {
                return Err(HlsError::dims("se_forward", &[inputs.len()], &[p.len()]));
            }
        }
        let summary = g.param(&self.summary);
        let pos = g.param(&self.position_embedding);
        let mut rows = Vec::with_capacity(inputs.len() * 2);
        let mut blocks = Vec::with_capacity(inputs.len());
        let mut keep = Vec::new();
        let mut at = 0;
        for (i, &s0) in inputs.iter().enumerate() {
            let l = g.shape(s0)[0];
            if l == 0 || l > MAX_POSITIONS {
                return Err(HlsError::Capacity {
                    len: l,
                    max: MAX_POSITIONS,
                });
            }
            let positions: Vec<usize> = (0..l).collect();
            let pe = g.gather_rows(pos, &positions)?;
            let x = g.add(s0, pe)?;
            rows.push(summary);
            rows.push(x);
            blocks.push((at, at + l + 1));
            at += l + 1;
            keep.push(true);
            match padding {
                Some(p) if p[i].len() != l => return Err(HlsError::dims("se_forward", &[l], &[p[i].len()])),
                Some(p) => keep.extend(p[i].iter().map(|&x| !x)),
                None => keep.extend(std::iter::repeat_n(true, l)),
            }
        }
        let x = g.concat_rows(&rows)?;
        let x = g.dropout(x, cfg.dropout)?;
        let keep_opt = padding.map(|_| keep.as_slice());
        let mut out = self.stack.forward(g, x, &blocks, keep_opt, cfg, None)?;
        if padding.is_some() {
            out = g.mask_rows(out, &keep)?;
        }
        let mut results = Vec::with_capacity(inputs.len());
        for &(s, e) in &blocks {
            let statements = g.slice_rows(out, s + 1, e - s - 1)?;
            let program = match pooling {
                ProgramPooling::Summary => g.slice_rows(out, s, 1)?,
                ProgramPooling::Mean => {
                    let kept: Vec<usize> = (s + 1..e).filter(|&r| keep[r]).collect();
                    let picked = g.gather_rows(out, &kept)?;
                    g.span_mean(picked, &[(0, kept.len())])?
                }
            };
            results.push(SeOutput { program, statements });
        }
        Ok(results)
    }
}

/// `(program_vector [d_h], statement_vectors [L × d_h])` for one program.
pub fn se_forward<S: Scalar>(
    s0: &Tensor<S>,
    padding: Option<&[bool]>,
    weights: &SeWeights<S>,
    cfg: &EncoderConfig,
    pooling: ProgramPooling,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let x = g.constant(s0.clone());
    let pads = padding.map(|p| [p]);
    let out = weights.forward(&mut g, &[x], pads.as_ref().map(|p| &p[..]), cfg, pooling)?[0];
    let program = g.tensor(out.program);
    let program = Tensor::new(&[cfg.hidden], program.into_data())?;
    Ok((program, g.tensor(out.statements)))
}
