use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::TensorArchive;
use super::gradcheck::{numeric_gradient, relative_error};
use super::*;
use crate::error::HlsError;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Analytic gradient of `f` w.r.t. a single leaf, compared to central
/// differences at step 1e-5.
fn check_op(shape: &[usize], x: &[f64], f: impl Fn(&mut Graph<f64>, Var) -> crate::Result<Var>) {
    let mut g = Graph::new();
    let v = g.leaf(t(shape, x).trainable());
    let out = f(&mut g, v).unwrap();
    g.backward(out).unwrap();
    let analytic = g.grad(v).unwrap().to_vec();
    let numeric = numeric_gradient(x, 1e-5, |xs| {
        let mut g = Graph::new();
        let v = g.leaf(t(shape, xs));
        let out = f(&mut g, v)?;
        Ok(g.scalar_value(out))
    })
    .unwrap();
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        assert!(relative_error(*a, *n) < 1e-4, "entry {i}: analytic {a} vs numeric {n}");
    }
}

/// Projects a tensor-valued result to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let n = g.value(y).len();
    let w = rand_vec(&mut ChaCha8Rng::seed_from_u64(seed), n);
    g.weighted_sum(y, &w)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c), &[5., 6., 7., 8.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 1]);
    assert_eq!(g.value(c), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 8));
    let mut g = Graph::new();
    let av = g.constant(t(&[3, 4], &a));
    let bv = g.constant(t(&[4, 2], &b));
    let c = g.matmul(av, bv).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a[i * 4 + k] * b[k * 2 + j];
            }
            assert!((g.value(c)[i * 2 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        HlsError::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[0., 0.]));
    let y = g.softmax_rows(x, None).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.constant(t(&[1, 2], &[1f64.ln(), 3f64.ln()]));
    let y = g.softmax_rows(x, None).unwrap();
    assert!((g.value(y)[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y)[1] - 0.75).abs() < 1e-15);

    let x = g.constant(t(&[1, 3], &[5., 5., 5.]));
    let y = g.softmax_rows(x, Some(&[true, true, false])).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5, 0.0]);
}

#[test]
fn softmax_fully_masked_row_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let err = g.softmax_rows(x, Some(&[true, false, false, false])).unwrap_err();
    assert!(matches!(err, HlsError::FullyMasked { row: 1 }));
}

#[test]
fn softmax_rows_sum_to_one_and_masked_entries_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
        let x: Vec<f64> = (0..r * c).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.7)).collect();
        for i in 0..r {
            mask[i * c] = true;
        }
        let mut g = Graph::new();
        let xv = g.constant(t(&[r, c], &x));
        let y = g.softmax_rows(xv, Some(&mask)).unwrap();
        for i in 0..r {
            let row = &g.value(y)[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for j in 0..c {
                if !mask[i * c + j] {
                    assert_eq!(row[j], 0.0);
                }
                assert!(row[j] >= 0.0);
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::ones(&[4]));
    let bias = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(t(&[1, 4], &[1., 1., 1., 1.]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert_eq!(g.value(y), &[0., 0., 0., 0.]);

    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[-1., 1.]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-6 && (g.value(y)[1] - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_matches_direct_mean_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 7;
    let x = rand_vec(&mut rng, 3 * d);
    let gain = rand_vec(&mut rng, d);
    let bias = rand_vec(&mut rng, d);
    let mut g = Graph::new();
    let xv = g.constant(t(&[3, d], &x));
    let gv = g.constant(t(&[d], &gain));
    let bv = g.constant(t(&[d], &bias));
    let y = g.layer_norm(xv, gv, bv, 1e-12).unwrap();
    for r in 0..3 {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        // Undo the affine map and check standardization directly.
        let z: Vec<f64> = (0..d).map(|j| (g.value(y)[r * d + j] - bias[j]) / gain[j]).collect();
        let zm = z.iter().sum::<f64>() / d as f64;
        let zv = z.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / d as f64;
        assert!(zm.abs() < 1e-9, "mean {zm}");
        assert!((zv - 1.0).abs() < 1e-9, "var {zv}");
        for j in 0..d {
            let expect = (row[j] - mean) / (var + 1e-12).sqrt() * gain[j] + bias[j];
            assert!((g.value(y)[r * d + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_lookup_examples() {
    let table = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
    let mut g = Graph::new();
    let tv = g.leaf(table.clone().trainable());
    let e = g.embedding_lookup(tv, &[0]).unwrap();
    assert_eq!(g.value(e), &[1., 2.]);

    let e = g.embedding_lookup(tv, &[2, 2]).unwrap();
    let s = g.sum(e);
    g.backward(s).unwrap();
    assert_eq!(g.grad(tv).unwrap(), &[0., 0., 0., 0., 2., 2.]);

    let err = g.embedding_lookup(tv, &[1, 3]).unwrap_err();
    assert!(matches!(err, HlsError::Vocabulary { id: 3, size: 3 }));
}

#[test]
fn embedding_lookup_matches_row_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (v, d) = (11, 5);
    let table = rand_vec(&mut rng, v * d);
    let ids: Vec<usize> = (0..20).map(|_| rng.random_range(0..v)).collect();
    let mut g = Graph::new();
    let tv = g.constant(t(&[v, d], &table));
    let e = g.embedding_lookup(tv, &ids).unwrap();
    for (r, &id) in ids.iter().enumerate() {
        assert_eq!(&g.value(e)[r * d..(r + 1) * d], &table[id * d..(id + 1) * d]);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(t(&[1, 2], &[10., -10.]));
    let ce = g.cross_entropy(l, &[0], None).unwrap();
    assert!(g.scalar_value(ce) < 1e-4);

    let l = g.constant(t(&[1, 2], &[0., 0.]));
    let ce = g.cross_entropy(l, &[1], None).unwrap();
    assert!((g.scalar_value(ce) - 2f64.ln()).abs() < 1e-15);

    let err = g.cross_entropy(l, &[2], None).unwrap_err();
    assert!(matches!(err, HlsError::TargetOutOfRange { target: 2, classes: 2 }));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, c) = (6, 4);
    let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-5.0..5.0)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let weights = [0.5, 2.0, 1.0, 3.0];
    let direct = |w: Option<&[f64]>| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let row = &logits[i * c..(i + 1) * c];
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            let wi = w.map_or(1.0, |w| w[targets[i]]);
            num += wi * (lse - row[targets[i]]);
            den += wi;
        }
        num / den
    };
    let mut g = Graph::new();
    let l = g.constant(t(&[n, c], &logits));
    let ce = g.cross_entropy(l, &targets, None).unwrap();
    assert!((g.scalar_value(ce) - direct(None)).abs() < 1e-10);
    let ce = g.cross_entropy(l, &targets, Some(&weights)).unwrap();
    assert!((g.scalar_value(ce) - direct(Some(&weights))).abs() < 1e-10);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]).trainable());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.; 6]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1., 2.]).trainable());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., 4.]);

    // A second backward without zeroing accumulates.
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4., 8.]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1., 2.]).trainable());
    assert!(matches!(g.backward(x), Err(HlsError::NonScalarLoss(_))));
}

#[test]
fn gradient_of_every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x34 = rand_vec(&mut rng, 12);
    let w = t(&[4, 2], &rand_vec(&mut rng, 8));
    let b4 = t(&[4], &rand_vec(&mut rng, 4));

    check_op(&[3, 4], &x34, |g, v| {
        let wv = g.constant(w.clone());
        let y = g.matmul(v, wv)?;
        readout(g, y, 1)
    });
    check_op(&[4, 2], w.data(), |g, v| {
        let xv = g.constant(t(&[3, 4], &x34));
        let y = g.matmul(xv, v)?;
        readout(g, y, 2)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let y = g.transpose(v)?;
        readout(g, y, 3)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let y = g.mul(v, v)?;
        let z = g.add(y, v)?;
        let z = g.scale(z, 0.7);
        readout(g, z, 4)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let bv = g.constant(b4.clone());
        let y = g.add_row(v, bv)?;
        readout(g, y, 5)
    });
    check_op(&[4], b4.data(), |g, v| {
        let xv = g.constant(t(&[3, 4], &x34));
        let y = g.add_row(xv, v)?;
        readout(g, y, 6)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let a = g.gelu(v);
        let b = g.tanh(v);
        let c = g.sigmoid(v);
        let y = g.concat_cols(&[a, b, c])?;
        readout(g, y, 7)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let mask = [true, false, true, true, true, true, false, false, false, true, true, true];
        let y = g.softmax_rows(v, Some(&mask))?;
        readout(g, y, 8)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let gv = g.constant(t(&[4], &[1.5, -0.5, 0.3, 2.0]));
        let bv = g.constant(b4.clone());
        let y = g.layer_norm(v, gv, bv, 1e-12)?;
        readout(g, y, 9)
    });
    check_op(&[4], b4.data(), |g, v| {
        let xv = g.constant(t(&[3, 4], &x34));
        let bv = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(xv, v, bv, 1e-12)?;
        readout(g, y, 10)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let y = g.gather_rows(v, &[2, 0, 2, 1])?;
        readout(g, y, 11)
    });
    check_op(&[3, 4], &x34, |g, v| g.cross_entropy(v, &[3, 0, 1], Some(&[1.0, 2.0, 0.5, 1.5])));
    check_op(&[3, 4], &x34, |g, v| {
        let a = g.slice_rows(v, 1, 2)?;
        let b = g.slice_cols(v, 1, 2)?;
        let bb = g.concat_cols(&[b, b])?;
        let c = g.concat_rows(&[a, bb])?;
        readout(g, c, 12)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let y = g.mask_rows(v, &[true, false, true])?;
        let y = g.reshape(y, &[12])?;
        let y = g.reshape(y, &[6, 2])?;
        readout(g, y, 13)
    });
    let x52 = rand_vec(&mut rng, 10);
    let spans = [(0, 2), (2, 3), (3, 5)];
    check_op(&[5, 2], &x52, |g, v| {
        let y = g.span_mean(v, &spans)?;
        readout(g, y, 14)
    });
    check_op(&[5, 2], &x52, |g, v| {
        let s = g.constant(t(&[5], &[0.3, -1.0, 2.0, 0.5, 0.1]));
        let y = g.span_softmax_pool(v, s, &spans)?;
        readout(g, y, 15)
    });
    check_op(&[5], &[0.3, -1.0, 2.0, 0.5, 0.1], |g, v| {
        let xv = g.constant(t(&[5, 2], &x52));
        let y = g.span_softmax_pool(xv, v, &spans)?;
        readout(g, y, 16)
    });
    check_op(&[3, 4], &x34, |g, v| {
        let m = g.mean(v);
        let s = g.sum(v);
        let both = g.reshape(m, &[1, 1])?;
        let s = g.reshape(s, &[1, 1])?;
        let y = g.mul(both, s)?;
        g.reshape(y, &[])
    });
}

#[test]
fn shared_parameter_accumulates_one_gradient() {
    let p = t(&[1, 2], &[1.0, 2.0]).trainable();
    let mut g = Graph::new();
    let a = g.param(&p);
    let b = g.param(&p);
    assert_eq!(a, b);
    let y = g.add(a, b).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.param_grad(&p).unwrap(), &[2.0, 2.0]);
}

#[test]
fn dropout_is_identity_in_eval_and_seeded_in_training() {
    let x = t(&[4, 4], &[1.0; 16]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    assert_eq!(g.dropout(v, 0.5).unwrap(), v);

    let run = || {
        let mut g = Graph::training(ChaCha8Rng::seed_from_u64(1));
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.5).unwrap();
        g.value(y).to_vec()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
}

struct Single(Tensor<f64>);

impl Parameters<f64> for Single {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, f64>) {
        f(&params::join(prefix, "w"), &self.0);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, f64>) {
        f(&params::join(prefix, "w"), &mut self.0);
    }
}

#[test]
fn adamw_zero_grad_leaves_params_unchanged() {
    let mut p = Single(t(&[3], &[0.5, -1.0, 2.0]).trainable());
    p.0.accumulate_grad(&[0.0; 3]).unwrap();
    let mut st = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adamw_step(&mut p, &mut st).unwrap();
    assert_eq!(p.0.data(), &[0.5, -1.0, 2.0]);
    assert_eq!(st.t, 1);
}

#[test]
fn adamw_first_step_moves_by_learning_rate() {
    let mut p = Single(t(&[1], &[1.0]).trainable());
    p.0.accumulate_grad(&[1.0]).unwrap();
    let mut st = OptimizerState::new(AdamWConfig {
        learning_rate: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adamw_step(&mut p, &mut st).unwrap();
    assert!((p.0.data()[0] - 0.9).abs() < 1e-6);
}

#[test]
fn adamw_three_step_trace_matches_reference() {
    let cfg = AdamWConfig {
        learning_rate: 0.05,
        beta1: 0.8,
        beta2: 0.95,
        epsilon: 1e-6,
        weight_decay: 0.1,
    };
    let grads = [[0.3, -1.2], [0.1, 0.4], [-0.7, 2.0]];
    let mut p = Single(t(&[2], &[1.0, -0.5]).trainable());
    let mut st = OptimizerState::new(cfg);

    // Reference: decoupled decay applied to the weight, then the Adam step.
    let mut w = [1.0f64, -0.5];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for (step, g) in grads.iter().enumerate() {
        p.0.zero_grad();
        p.0.accumulate_grad(g).unwrap();
        adamw_step(&mut p, &mut st).unwrap();
        let t = (step + 1) as i32;
        for i in 0..2 {
            w[i] -= cfg.learning_rate * cfg.weight_decay * w[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            w[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
        for i in 0..2 {
            assert!((p.0.data()[i] - w[i]).abs() < 1e-12);
        }
    }
    assert_eq!(st.t, 3);
}

#[test]
fn adamw_skips_parameters_without_gradient() {
    let mut p = Single(t(&[2], &[1.0, 2.0]).trainable());
    let mut st = OptimizerState::new(AdamWConfig::default());
    adamw_step(&mut p, &mut st).unwrap();
    assert_eq!(p.0.data(), &[1.0, 2.0]);
    assert!(st.m.is_empty());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = Tensor::<f64>::randn(&[40, 30], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[30, 50], 1.0, &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let c = g.matmul(av, bv).unwrap();
        let s = g.softmax_rows(c, None).unwrap();
        g.value(s).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn archive_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
    let s = Tensor::<f64>::scalar(f64::MIN_POSITIVE);
    let f = Tensor::<f32>::randn(&[7], 1.0, &mut rng);
    let mut ar = TensorArchive::default();
    ar.insert("a", &a);
    ar.insert("s", &s);
    ar.insert("f", &f);
    ar.set_meta("config.layers", 2);
    ar.save(dir.path()).unwrap();
    let back = TensorArchive::load(dir.path()).unwrap();
    assert_eq!(back, ar);
    let a2: Tensor<f64> = back.tensor("a").unwrap();
    assert!(a2.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let f2: Tensor<f32> = back.tensor("f").unwrap();
    assert!(f2.data().iter().zip(f.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(back.meta("config.layers"), Some("2"));
}

#[test]
fn archive_rejects_truncated_blob() {
    let dir = tempfile::tempdir().unwrap();
    let mut ar = TensorArchive::default();
    ar.insert("a", &Tensor::<f64>::ones(&[4]));
    ar.save(dir.path()).unwrap();
    std::fs::write(dir.path().join(checkpoint::BLOB_FILE), [0u8; 8]).unwrap();
    assert!(TensorArchive::load(dir.path()).is_err());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn archive_round_trip_any_values(data in proptest::collection::vec(any::<f64>(), 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let mut ar = TensorArchive::default();
            ar.insert("x", &Tensor::new(&[data.len()], data.clone()).unwrap());
            ar.save(dir.path()).unwrap();
            let back: Vec<f64> = TensorArchive::load(dir.path()).unwrap().raw("x").unwrap();
            prop_assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
