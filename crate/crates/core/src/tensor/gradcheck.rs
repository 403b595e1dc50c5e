//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Parameters, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is numerically zero are judged on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tensors_checked: Vec<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn failures(&self, tol: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_err >= tol).collect()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Checks `per_tensor` entries of every trainable tensor of `model`: the
/// entry with the largest analytic gradient plus randomly chosen ones. The
/// numeric derivative uses the five-point central stencil with spacing
/// `step`.
///
/// `loss` must build a deterministic scalar loss (no dropout) on the graph it
/// is given.
pub fn check_parameters<P, F>(model: &mut P, mut loss: F, per_tensor: usize, step: f64, seed: u64) -> Result<GradCheckReport>
where
    P: Parameters<f64>,
    F: FnMut(&P, &mut Graph<f64>) -> Result<Var>,
{
    model.zero_grads();
    let mut g = Graph::new();
    let l = loss(model, &mut g)?;
    g.backward(l)?;
    model.accumulate_grads(&g)?;

    let mut targets: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit("", &mut |name, t| {
        if !t.requires_grad() {
            return;
        }
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let argmax = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map_or(0, |(i, _)| i);
        let mut idx = vec![argmax];
        let extra = per_tensor.saturating_sub(1).min(t.numel());
        idx.extend(sample(&mut rng, t.numel(), extra).into_iter().filter(|&i| i != argmax));
        idx.truncate(per_tensor.max(1));
        let picked = idx.iter().map(|&i| grad[i]).collect();
        targets.push((name.to_string(), idx, picked));
    });

    let mut report = GradCheckReport::default();
    for (name, idx, analytic) in targets {
        for (&i, &a) in idx.iter().zip(&analytic) {
            let p1 = eval_perturbed(model, &mut loss, &name, i, step)?;
            let m1 = eval_perturbed(model, &mut loss, &name, i, -step)?;
            let p2 = eval_perturbed(model, &mut loss, &name, i, 2.0 * step)?;
            let m2 = eval_perturbed(model, &mut loss, &name, i, -2.0 * step)?;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            report.entries.push(GradCheckEntry {
                name: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
        report.tensors_checked.push(name);
    }
    model.zero_grads();
    Ok(report)
}

fn eval_perturbed<P, F>(model: &mut P, loss: &mut F, name: &str, i: usize, delta: f64) -> Result<f64>
where
    P: Parameters<f64>,
    F: FnMut(&P, &mut Graph<f64>) -> Result<Var>,
{
    let mut original = 0.0;
    model.visit_mut("", &mut |n, t| {
        if n == name {
            original = t.data()[i];
            t.data_mut()[i] = original + delta;
        }
    });
    let mut g = Graph::new();
    let out = loss(model, &mut g).map(|l| g.scalar_value(l));
    model.visit_mut("", &mut |n, t| {
        if n == name {
            t.data_mut()[i] = original;
        }
    });
    out
}

/// Finite-difference gradient of a closure over a plain input vector, for
/// checking individual operations.
pub fn numeric_gradient<F>(x: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        buf[i] = x[i] + step;
        let plus = f(&buf)?;
        buf[i] = x[i] - step;
        let minus = f(&buf)?;
        buf[i] = x[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}
