use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{matmul_raw, matmul_raw_a_bt, matmul_raw_at_b};
use super::Tensor;
use crate::error::{HlsError, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    WeightedSum {
        x: Var,
        w: Vec<S>,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    SpanMean {
        x: Var,
        spans: Vec<(usize, usize)>,
    },
    SpanSoftmaxPool {
        x: Var,
        scores: Var,
        spans: Vec<(usize, usize)>,
        weights: Vec<S>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// index order is a valid topological order for backpropagation.
///
/// Gradients from repeated [`Graph::backward`] calls accumulate; build a new
/// graph (or call [`Graph::zero_grad`]) to start over.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    params: HashMap<u64, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(HlsError::shape(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c: S = lit((2.0 / std::f64::consts::PI).sqrt());
    let a: S = lit(0.044715);
    let half: S = lit(0.5);
    let three: S = lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x);
    (y, dy)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn check_spans(spans: &[(usize, usize)], n: usize, op: &'static str) -> Result<()> {
    for &(s, e) in spans {
        if s >= e || e > n {
            return Err(HlsError::shape(op, format!("invalid span ({s}, {e}) for {n} rows")));
        }
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// A graph in training mode: dropout draws its masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph {
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf that tracks gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// Registers a parameter by identity; registering the same tensor twice
    /// returns the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad());
        self.params.insert(t.id(), v);
        v
    }

    pub fn param_var(&self, t: &Tensor<S>) -> Option<Var> {
        self.params.get(&t.id()).copied()
    }

    pub fn param_grad(&self, t: &Tensor<S>) -> Option<&[S]> {
        self.param_var(t).and_then(|v| self.grad(v))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("node shape")
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = dims2(self.shape(a), "matmul")?;
        let (k2, c) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(HlsError::dims("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a), self.value(b), r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![r, c], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let src = self.value(a);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HlsError::dims("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HlsError::dims("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, k), rg)
    }

    /// `a[r×c] + b[c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "add_row")?;
        if self.value(b).len() != c {
            return Err(HlsError::dims("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![r, c], out, Op::AddRow(a, b), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax. `mask` (row-major, same extent as `x`) marks allowed
    /// entries; disallowed entries get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(HlsError::dims("softmax_rows", self.shape(x), &[m.len()]));
            }
        }
        let xv = self.value(x);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut max = S::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    any = true;
                    max = max.max(v);
                }
            }
            if !any {
                return Err(HlsError::FullyMasked { row: i });
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, c], out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (r, d) = dims2(self.shape(x), "layer_norm")?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(HlsError::dims("layer_norm", self.shape(x), self.shape(gain)));
        }
        let dn: S = S::from_usize(d).expect("d");
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![S::zero(); r * d];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            vec![r, d],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup; backward scatter-adds into the looked-up rows.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(HlsError::Vocabulary { id: bad, size: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Per-row `−log softmax(logits)[target]`, natural log, shape `[n]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(HlsError::dims("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(HlsError::TargetOutOfRange { target: t, classes: c });
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); n * c];
        let mut out = vec![S::zero(); n];
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (p, &z) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (z - max).exp();
                sum += *p;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= sum);
            out[i] = sum.ln() + max - row[targets[i]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![n],
            out,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy; with `class_weights`, the weighted mean
    /// `Σ w[t_i]·ce_i / Σ w[t_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[S]>) -> Result<Var> {
        if targets.is_empty() {
            return Err(HlsError::shape("cross_entropy", "no rows"));
        }
        let rows = self.cross_entropy_rows(logits, targets)?;
        let w: Vec<S> = match class_weights {
            Some(cw) => {
                let c = self.shape(logits)[1];
                if cw.len() != c {
                    return Err(HlsError::dims("cross_entropy", self.shape(logits), &[cw.len()]));
                }
                targets.iter().map(|&t| cw[t]).collect()
            }
            None => vec![S::one(); targets.len()],
        };
        let total: S = w.iter().copied().sum();
        let w = w.into_iter().map(|x| x / total).collect::<Vec<_>>();
        self.weighted_sum(rows, &w)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "slice_rows")?;
        if start + len > r {
            return Err(HlsError::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "slice_cols")?;
        if start + len > c {
            return Err(HlsError::shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| HlsError::shape("concat_rows", "no inputs"))?;
        let (_, c) = dims2(self.shape(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = dims2(self.shape(p), "concat_rows")?;
            if c2 != c {
                return Err(HlsError::dims("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| HlsError::shape("concat_cols", "no inputs"))?;
        let (r, _) = dims2(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = dims2(self.shape(p), "concat_cols")?;
            if r2 != r {
                return Err(HlsError::dims("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::from_usize(self.value(x).len()).expect("n");
        let s = self.sum(x);
        self.scale(s, S::one() / n)
    }

    /// `Σ w_i x_i` over all elements, `w` constant.
    pub fn weighted_sum(&mut self, x: Var, w: &[S]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(HlsError::dims("weighted_sum", self.shape(x), &[w.len()]));
        }
        let s = self.value(x).iter().zip(w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![], vec![s], Op::WeightedSum { x, w: w.to_vec() }, rg))
    }

    /// Zeroes rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "mask_rows")?;
        if keep.len() != r {
            return Err(HlsError::dims("mask_rows", self.shape(x), &[keep.len()]));
        }
        let mut out = self.value(x).to_vec();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o = S::zero());
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, c], out, Op::MaskRows { x, keep: keep.to_vec() }, rg))
    }

    /// Row `i` is the mean of rows `spans[i].0 .. spans[i].1` of `x`.
    pub fn span_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "span_mean")?;
        check_spans(spans, n, "span_mean")?;
        let xv = self.value(x);
        let mut out = vec![S::zero(); spans.len() * d];
        for (i, &(s, e)) in spans.iter().enumerate() {
            let orow = &mut out[i * d..(i + 1) * d];
            for j in s..e {
                for (o, &v) in orow.iter_mut().zip(&xv[j * d..(j + 1) * d]) {
                    *o += v;
                }
            }
            let len = S::from_usize(e - s).expect("len");
            orow.iter_mut().for_each(|o| *o /= len);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![spans.len(), d],
            out,
            Op::SpanMean {
                x,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    /// Per-span softmax of `scores` (one per row of `x`) used as convex
    /// weights over the span's rows of `x`.
    pub fn span_softmax_pool(&mut self, x: Var, scores: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "span_softmax_pool")?;
        if self.value(scores).len() != n {
            return Err(HlsError::dims("span_softmax_pool", self.shape(x), self.shape(scores)));
        }
        check_spans(spans, n, "span_softmax_pool")?;
        let xv = self.value(x);
        let sv = self.value(scores);
        let mut weights = vec![S::zero(); n];
        let mut out = vec![S::zero(); spans.len() * d];
        for (i, &(s, e)) in spans.iter().enumerate() {
            let max = sv[s..e].iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in s..e {
                weights[j] = (sv[j] - max).exp();
                sum += weights[j];
            }
            // Σ e_j·x_j / Σ e_j: with equal scores every e_j is 1 and the
            // result is bitwise the span mean.
            let orow = &mut out[i * d..(i + 1) * d];
            for j in s..e {
                let a = weights[j];
                for (o, &v) in orow.iter_mut().zip(&xv[j * d..(j + 1) * d]) {
                    *o += a * v;
                }
                weights[j] /= sum;
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        let rg = self.rg(&[x, scores]);
        Ok(self.push(
            vec![spans.len(), d],
            out,
            Op::SpanSoftmaxPool {
                x,
                scores,
                spans: spans.to_vec(),
                weights,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(HlsError::dims("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep: S = lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let shape = self.shape(x).to_vec();
        let m = self.constant(Tensor::new(&shape, mask)?);
        self.mul(x, m)
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagates from a scalar `loss`, adding into existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(HlsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let c = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let da = matmul_raw_a_bt(g, &self.nodes[b.0].value, r, c, k);
                    send(*a, &mut |s| s.iter_mut().zip(&da).for_each(|(x, &y)| *x += y));
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_raw_at_b(&self.nodes[a.0].value, g, r, k, c);
                    send(*b, &mut |s| s.iter_mut().zip(&db).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                send(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                send(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &mut |s| {
                    for ((x, &gy), &o) in s.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                });
                send(*b, &mut |s| {
                    for ((x, &gy), &o) in s.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                });
            }
            Op::Scale(a, k) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *k));
            }
            Op::AddRow(a, b) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let c = self.nodes[b.0].value.len();
                send(*b, &mut |s| {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                send(*a, &mut |s| {
                    for ((x, &gy), &v) in s.iter_mut().zip(g).zip(av) {
                        *x += gy * gelu_parts(v).1;
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &node.value;
                send(*a, &mut |s| {
                    for ((x, &gy), &y) in s.iter_mut().zip(g).zip(yv) {
                        *x += gy * (S::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                send(*a, &mut |s| {
                    for ((x, &gy), &y) in s.iter_mut().zip(g).zip(yv) {
                        *x += gy * y * (S::one() - y);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.shape[1];
                let yv = &node.value;
                send(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(yv.chunks(c)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&gy, &y)| gy * y).sum();
                        for ((x, &gy), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gy - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.shape[1];
                let dn = S::from_usize(d).expect("d");
                let gv = &self.nodes[gain.0].value;
                send(*x, &mut |s| {
                    for (r, ((srow, grow), hrow)) in s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<S> = grow.iter().zip(gv).map(|(&gy, &w)| gy * w).collect();
                        let sum_dh: S = dh.iter().copied().sum();
                        let sum_dh_h: S = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / dn;
                        for ((o, &a), &h) in srow.iter_mut().zip(&dh).zip(hrow) {
                            *o += k * (dn * a - sum_dh - h * sum_dh_h);
                        }
                    }
                });
                send(*gain, &mut |s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gy), &h) in s.iter_mut().zip(grow).zip(hrow) {
                            *o += gy * h;
                        }
                    }
                });
                send(*bias, &mut |s| {
                    for grow in g.chunks(d) {
                        s.iter_mut().zip(grow).for_each(|(o, &gy)| *o += gy);
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let d = node.shape[1];
                send(*table, &mut |s| {
                    for (r, &id) in idx.iter().enumerate() {
                        for (o, &gy) in s[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += gy;
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let c = self.nodes[logits.0].shape[1];
                send(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        let gy = g[r];
                        for j in 0..c {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            s[r * c + j] += gy * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.shape[1];
                send(*x, &mut |s| {
                    for (o, &gy) in s[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += gy;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = self.nodes[x.0].shape[1];
                send(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..len {
                            s[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    send(p, &mut |s| s.iter_mut().zip(&g[off..off + n]).for_each(|(o, &gy)| *o += gy));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let r = node.shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    send(p, &mut |s| {
                        for i in 0..r {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Sum(x) => {
                let gy = g[0];
                send(*x, &mut |s| s.iter_mut().for_each(|o| *o += gy));
            }
            Op::WeightedSum { x, w } => {
                let gy = g[0];
                send(*x, &mut |s| s.iter_mut().zip(w).for_each(|(o, &wi)| *o += gy * wi));
            }
            Op::MaskRows { x, keep } => {
                let c = node.shape[1];
                send(*x, &mut |s| {
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            for j in 0..c {
                                s[i * c + j] += g[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::SpanMean { x, spans } => {
                let d = node.shape[1];
                send(*x, &mut |s| {
                    for (i, &(a, b)) in spans.iter().enumerate() {
                        let inv = S::one() / S::from_usize(b - a).expect("len");
                        for j in a..b {
                            for k in 0..d {
                                s[j * d + k] += g[i * d + k] * inv;
                            }
                        }
                    }
                });
            }
            Op::SpanSoftmaxPool {
                x,
                scores,
                spans,
                weights,
            } => {
                let d = node.shape[1];
                let xv = &self.nodes[x.0].value;
                send(*x, &mut |s| {
                    for (i, &(a, b)) in spans.iter().enumerate() {
                        for j in a..b {
                            for k in 0..d {
                                s[j * d + k] += weights[j] * g[i * d + k];
                            }
                        }
                    }
                });
                send(*scores, &mut |s| {
                    for (i, &(a, b)) in spans.iter().enumerate() {
                        let grow = &g[i * d..(i + 1) * d];
                        let da: Vec<S> = (a..b)
                            .map(|j| xv[j * d..(j + 1) * d].iter().zip(grow).map(|(&v, &gy)| v * gy).sum())
                            .collect();
                        let mix: S = (a..b).zip(&da).map(|(j, &v)| weights[j] * v).sum();
                        for (j, &v) in (a..b).zip(&da) {
                            s[j] += weights[j] * (v - mix);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                send(*x, &mut |s| s.iter_mut().zip(g).for_each(|(o, &gy)| *o += gy));
            }
        }
    }
}
