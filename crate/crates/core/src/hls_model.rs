//! The full hierarchical encoder: segment-wise token encoding, merge,
//! Token2Statement, statement encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::scalar::Scalar;
use crate::se_encoder::{ProgramPooling, SeWeights};
use crate::segmenter::{check_m_len, segment_ranges, EncodedSample, MAX_STATEMENTS};
use crate::te_encoder::{EncoderConfig, TeWeights};
use crate::tensor::{impl_parameters, Graph, Tensor, Var};
use crate::token2statement::{T2SKind, Token2Statement};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub m_len: usize,
    #[serde(default)]
    pub t2s: T2SKind,
    #[serde(default)]
    pub pooling: ProgramPooling,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, m_len: usize, t2s: T2SKind) -> Self {
        ModelConfig {
            encoder,
            m_len,
            t2s,
            pooling: ProgramPooling::Summary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        check_m_len(self.m_len)
    }
}

#[derive(Clone, Debug)]
pub struct HlsModel<S> {
    pub config: ModelConfig,
    pub te: TeWeights<S>,
    pub t2s: Token2Statement<S>,
    pub se: SeWeights<S>,
}

impl_parameters!(HlsModel { te, t2s, se });

/// Graph nodes of one encoded sample: merged token vectors `[n × d_h]`,
/// program vector `[1 × d_h]`, statement vectors `[L × d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub tokens: Var,
    pub program: Var,
    pub statements: Var,
}

/// Materialised outputs of [`encode_program`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramEncoding<S: Scalar> {
    pub program: Tensor<S>,
    pub statements: Tensor<S>,
    pub tokens: Tensor<S>,
}

impl<S: Scalar> HlsModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let te = TeWeights::new(&config.encoder, &mut rng);
        let t2s = Token2Statement::new(config.t2s, config.encoder.hidden, config.m_len, &mut rng);
        let se = SeWeights::new(&config.encoder, &mut rng);
        Ok(HlsModel { config, te, t2s, se })
    }

    pub fn hidden(&self) -> usize {
        self.config.encoder.hidden
    }

    /// Structural checks done before any tensor is built.
    pub fn check_sample(&self, enc: &EncodedSample) -> Result<()> {
        let n = enc.n();
        if n > self.config.m_len {
            return Err(HlsError::Capacity {
                len: n,
                max: self.config.m_len,
            });
        }
        let l = enc.num_lines();
        if l == 0 || l > MAX_STATEMENTS {
            return Err(HlsError::Capacity {
                len: l,
                max: MAX_STATEMENTS,
            });
        }
        if enc.segment_boundaries != segment_ranges(n) {
            return Err(HlsError::shape(
                "encode_program",
                format!("sample {:?}: segment boundaries do not match its length", enc.id),
            ));
        }
        let mut at = 1;
        for &(s, e) in &enc.line_spans {
            if s != at || e <= s {
                return Err(HlsError::shape(
                    "encode_program",
                    format!("sample {:?}: line spans do not tile 1..{n}", enc.id),
                ));
            }
            at = e;
        }
        if at != n {
            return Err(HlsError::shape(
                "encode_program",
                format!("sample {:?}: line spans do not tile 1..{n}", enc.id),
            ));
        }
        Ok(())
    }

    /// Encodes a batch on `g`. All segments of all samples go through the
    /// token encoder together, each attending only within itself; the
    /// results are split back per sample in order.
    pub fn forward(&self, g: &mut Graph<S>, samples: &[&EncodedSample]) -> Result<Vec<SampleVars>> {
        for s in samples {
            self.check_sample(s)?;
        }
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = &self.config.encoder;
        let segments: Vec<&[usize]> = samples
            .iter()
            .flat_map(|s| s.segment_boundaries.iter().map(|&(a, b)| &s.token_ids[a..b]))
            .collect();
        let all = self.te.forward(g, &segments, None, cfg, None)?;

        let mut tokens = Vec::with_capacity(samples.len());
        let mut s0 = Vec::with_capacity(samples.len());
        let mut offset = 0;
        for s in samples {
            let t = g.slice_rows(all, offset, s.n())?;
            offset += s.n();
            s0.push(self.t2s.forward(g, t, &s.line_spans)?);
            tokens.push(t);
        }
        let se = self.se.forward(g, &s0, None, cfg, self.config.pooling)?;
        Ok(tokens
            .into_iter()
            .zip(se)
            .map(|(tokens, o)| SampleVars {
                tokens,
                program: o.program,
                statements: o.statements,
            })
            .collect())
    }
}

fn materialise<S: Scalar>(g: &Graph<S>, v: SampleVars) -> Result<ProgramEncoding<S>> {
    let p = g.tensor(v.program);
    Ok(ProgramEncoding {
        program: Tensor::new(&[p.numel()], p.into_data())?,
        statements: g.tensor(v.statements),
        tokens: g.tensor(v.tokens),
    })
}

/// Program vector `[d_h]` and statement vectors `[L × d_h]` of one sample,
/// evaluated without dropout.
pub fn encode_program<S: Scalar>(enc: &EncodedSample, model: &HlsModel<S>) -> Result<ProgramEncoding<S>> {
    let mut g = Graph::new();
    let v = model.forward(&mut g, &[enc])?[0];
    materialise(&g, v)
}

/// [`encode_program`] for many samples in one batched pass.
pub fn encode_batch<S: Scalar>(encs: &[EncodedSample], model: &HlsModel<S>) -> Result<Vec<ProgramEncoding<S>>> {
    let refs: Vec<&EncodedSample> = encs.iter().collect();
    let mut g = Graph::new();
    let vars = model.forward(&mut g, &refs)?;
    vars.into_iter().map(|v| materialise(&g, v)).collect()
}
