use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{HlsError, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments keyed by parameter name, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One AdamW step (decoupled weight decay, bias-corrected moments) over every
/// parameter that currently holds a gradient. Parameters without a gradient
/// are left untouched. Increments `state.t` by one.
pub fn adamw_step<S: Scalar, P: Parameters<S> + ?Sized>(params: &mut P, state: &mut OptimizerState<S>) -> Result<()> {
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let (lr, b1, b2, eps, wd): (S, S, S, S, S) = (
        lit(c.learning_rate),
        lit(c.beta1),
        lit(c.beta2),
        lit(c.epsilon),
        lit(c.weight_decay),
    );
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let mut err = None;
    params.visit_mut("", &mut |name, p| {
        if err.is_some() || !p.requires_grad() {
            return;
        }
        let Some(g) = p.grad().map(<[S]>::to_vec) else { return };
        let n = p.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![S::zero(); n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![S::zero(); n]);
        if m.len() != n || v.len() != n {
            err = Some(HlsError::dims("adamw_step", p.shape(), &[m.len()]));
            return;
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w -= lr * wd * *w;
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
