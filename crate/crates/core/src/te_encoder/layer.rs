use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{impl_parameters, Graph, Tensor, Var};

pub const MAX_POSITIONS: usize = 512;
pub const LN_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

/// Shape of one transformer stack; the token and statement encoders share it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

fn default_max_positions() -> usize {
    MAX_POSITIONS
}

impl EncoderConfig {
    /// 2 layers, hidden 64, 4 heads, feed-forward 256.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            max_positions: MAX_POSITIONS,
            dropout: 0.0,
            vocab_size,
        }
    }

    /// 6 layers, hidden 768, 12 heads, feed-forward 3072.
    pub fn paper(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 6,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            max_positions: MAX_POSITIONS,
            dropout: 0.1,
            vocab_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HlsError::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return bad("layers, hidden, heads and ffn must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_positions < MAX_POSITIONS {
            return bad(format!("max_positions must be at least {MAX_POSITIONS}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= crate::segmenter::NUM_RESERVED {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        Ok(())
    }
}

/// One post-norm transformer layer. Head `i` owns columns
/// `i·d_k .. (i+1)·d_k` of `wq`, `wk` and `wv`.
#[derive(Clone, Debug)]
pub struct EncoderLayer<S> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ffn_in: Tensor<S>,
    pub ffn_in_bias: Tensor<S>,
    pub ffn_out: Tensor<S>,
    pub ffn_out_bias: Tensor<S>,
    pub ln_attn_gain: Tensor<S>,
    pub ln_attn_bias: Tensor<S>,
    pub ln_ffn_gain: Tensor<S>,
    pub ln_ffn_bias: Tensor<S>,
}

impl_parameters!(EncoderLayer {
    wq,
    wk,
    wv,
    wo,
    ffn_in,
    ffn_in_bias,
    ffn_out,
    ffn_out_bias,
    ln_attn_gain,
    ln_attn_bias,
    ln_ffn_gain,
    ln_ffn_bias
});

impl<S: Scalar> EncoderLayer<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (d, f) = (cfg.hidden, cfg.ffn);
        let w = |r: usize, c: usize, rng: &mut R| Tensor::randn(&[r, c], INIT_STD, rng).trainable();
        EncoderLayer {
            wq: w(d, d, rng),
            wk: w(d, d, rng),
            wv: w(d, d, rng),
            wo: w(d, d, rng),
            ffn_in: w(d, f, rng),
            ffn_in_bias: Tensor::zeros(&[f]).trainable(),
            ffn_out: w(f, d, rng),
            ffn_out_bias: Tensor::zeros(&[d]).trainable(),
            ln_attn_gain: Tensor::ones(&[d]).trainable(),
            ln_attn_bias: Tensor::zeros(&[d]).trainable(),
            ln_ffn_gain: Tensor::ones(&[d]).trainable(),
            ln_ffn_bias: Tensor::zeros(&[d]).trainable(),
        }
    }

    /// `x` holds the rows of several independent sequences; `blocks` are
    /// their row ranges and attention never crosses a block. `keep` marks
    /// attendable rows (keys); every block needs at least one.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        blocks: &[(usize, usize)],
        keep: Option<&[bool]>,
        cfg: &EncoderConfig,
        mut maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let dk = cfg.head_dim();
        let scale: S = lit(1.0 / (dk as f64).sqrt());
        let wq = g.param(&self.wq);
        let wk = g.param(&self.wk);
        let wv = g.param(&self.wv);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;

        let mut block_out = Vec::with_capacity(blocks.len());
        for &(s, e) in blocks {
            let len = e - s;
            let mask: Option<Vec<bool>> =
                keep.map(|kp| (0..len).flat_map(|_| kp[s..e].iter().copied()).collect());
            let (qb, kb, vb) = (g.slice_rows(q, s, len)?, g.slice_rows(k, s, len)?, g.slice_rows(v, s, len)?);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = g.slice_cols(qb, h * dk, dk)?;
                let kh = g.slice_cols(kb, h * dk, dk)?;
                let vh = g.slice_cols(vb, h * dk, dk)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores, mask.as_deref())?;
                if let Some(m) = maps.as_deref_mut() {
                    m.push(attn);
                }
                heads.push(g.matmul(attn, vh)?);
            }
            block_out.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let ctx = if block_out.len() == 1 { block_out[0] } else { g.concat_rows(&block_out)? };

        let wo = g.param(&self.wo);
        let attn_out = g.matmul(ctx, wo)?;
        let attn_out = g.dropout(attn_out, cfg.dropout)?;
        let res = g.add(attn_out, x)?;
        let (lg, lb) = (g.param(&self.ln_attn_gain), g.param(&self.ln_attn_bias));
        let gn = g.layer_norm(res, lg, lb, lit(LN_EPS))?;

        let w1 = g.param(&self.ffn_in);
        let b1 = g.param(&self.ffn_in_bias);
        let w2 = g.param(&self.ffn_out);
        let b2 = g.param(&self.ffn_out_bias);
        let hdn = g.matmul(gn, w1)?;
        let hdn = g.add_row(hdn, b1)?;
        let hdn = g.gelu(hdn);
        let ff = g.matmul(hdn, w2)?;
        let ff = g.add_row(ff, b2)?;
        let ff = g.dropout(ff, cfg.dropout)?;
        let res = g.add(ff, gn)?;
        let (lg, lb) = (g.param(&self.ln_ffn_gain), g.param(&self.ln_ffn_bias));
        g.layer_norm(res, lg, lb, lit(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct LayerStack<S> {
    pub layers: Vec<EncoderLayer<S>>,
}

impl_parameters!(LayerStack { layers });

impl<S: Scalar> LayerStack<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        LayerStack {
            layers: (0..cfg.layers).map(|_| EncoderLayer::new(cfg, rng)).collect(),
        }
    }

    /// Runs every layer. When `maps` is given, it receives one entry per
    /// layer holding the post-softmax attention matrices, block-major then
    /// head.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        mut x: Var,
        blocks: &[(usize, usize)],
        keep: Option<&[bool]>,
        cfg: &EncoderConfig,
        mut maps: Option<&mut Vec<Vec<Var>>>,
    ) -> Result<Var> {
        check_blocks(blocks, g.shape(x)[0])?;
        if let Some(kp) = keep {
            if kp.len() != g.shape(x)[0] {
                return Err(HlsError::dims("encoder", g.shape(x), &[kp.len()]));
            }
        }
        for layer in &self.layers {
            let mut layer_maps = Vec::new();
            let want = maps.is_some();
            x = layer.forward(g, x, blocks, keep, cfg, want.then_some(&mut layer_maps))?;
            if let Some(m) = maps.as_deref_mut() {
                m.push(layer_maps);
            }
        }
        Ok(x)
    }
}

fn check_blocks(blocks: &[(usize, usize)], n: usize) -> Result<()> {
    let mut at = 0;
    for &(s, e) in blocks {
        if s != at || e <= s {
            return Err(HlsError::shape("encoder", format!("blocks {blocks:?} do not tile 0..{n}")));
        }
        at = e;
    }
    if at != n {
        return Err(HlsError::shape("encoder", format!("blocks {blocks:?} do not tile 0..{n}")));
    }
    Ok(())
}
