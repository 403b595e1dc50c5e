//! Supervised detection: a coarse function-level head over the program
//! vector, a statement-level head over statement vectors, joint training
//! and gated inference.


use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::hls_model::HlsModel;
use crate::metrics::{classification_metrics, topk_count, ConfusionCounts, PredictionReport, StatementScore};
use crate::scalar::{lit, Scalar};
use crate::segmenter::EncodedSample;
use crate::te_encoder::INIT_STD;
use crate::tensor::{adamw_step, impl_parameters, AdamWConfig, Graph, Parameters, Tensor, Var};
use crate::train::{check_finite, derived_rng, LossRecord, Phase, TrainState, RNG_BATCH, RNG_DROPOUT};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_LAMBDA_FINE: f64 = 1.0;

/// Two-layer classifier `d_h → d_f → 2` with a tanh hidden layer.
#[derive(Clone, Debug)]
pub struct FfnHead<S> {
    pub hidden: Tensor<S>,
    pub hidden_bias: Tensor<S>,
    pub out: Tensor<S>,
    pub out_bias: Tensor<S>,
}

impl_parameters!(FfnHead {
    hidden,
    hidden_bias,
    out,
    out_bias
});

impl<S: Scalar> FfnHead<S> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_f: usize, rng: &mut R) -> Self {
        FfnHead {
            hidden: Tensor::randn(&[d_in, d_f], INIT_STD, rng).trainable(),
            hidden_bias: Tensor::zeros(&[d_f]).trainable(),
            out: Tensor::randn(&[d_f, 2], INIT_STD, rng).trainable(),
            out_bias: Tensor::zeros(&[2]).trainable(),
        }
    }

    /// Logits `[rows × 2]`.
    pub fn logits(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w1 = g.param(&self.hidden);
        let b1 = g.param(&self.hidden_bias);
        let w2 = g.param(&self.out);
        let b2 = g.param(&self.out_bias);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    /// Softmaxed `(p_nonvul, p_vul)` per row of `x`.
    pub fn probabilities(&self, x: &Tensor<S>) -> Result<Vec<[S; 2]>> {
        let mut g = Graph::new();
        let x = match x.shape() {
            [d] => Tensor::new(&[1, *d], x.data().to_vec())?,
            _ => x.clone(),
        };
        let xv = g.constant(x);
        let logits = self.logits(&mut g, xv)?;
        let p = g.softmax_rows(logits, None)?;
        Ok(g.value(p).chunks_exact(2).map(|r| [r[0], r[1]]).collect())
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHeads<S> {
    /// Coarse function-level head over the program vector.
    pub dnet: FfnHead<S>,
    /// Fine head applied to each statement vector.
    pub statement: FfnHead<S>,
    /// `p_vul ≥ threshold` predicts vulnerable.
    pub threshold: f64,
}

impl_parameters!(DetectionHeads { dnet, statement });

impl<S: Scalar> DetectionHeads<S> {
    pub fn new(hidden: usize, d_f: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_7465_6374);
        DetectionHeads {
            dnet: FfnHead::new(hidden, d_f, &mut rng),
            statement: FfnHead::new(hidden, d_f, &mut rng),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn head_hidden(&self) -> usize {
        self.dnet.hidden.cols()
    }
}

/// Encoder plus detection heads; the unit fine-tuning optimizes.
#[derive(Clone, Debug)]
pub struct Detector<S> {
    pub encoder: HlsModel<S>,
    pub heads: DetectionHeads<S>,
}

impl_parameters!(Detector { encoder, heads });

impl<S: Scalar> Detector<S> {
    /// Fresh heads of width `d_f` around `encoder`.
    pub fn new(encoder: HlsModel<S>, d_f: usize, seed: u64) -> Self {
        let heads = DetectionHeads::new(encoder.hidden(), d_f, seed);
        Detector { encoder, heads }
    }
}

/// `(p_nonvul, p_vul)` for a program vector `[d_h]` or `[1 × d_h]`.
pub fn coarse_logits<S: Scalar>(program: &Tensor<S>, heads: &DetectionHeads<S>) -> Result<[S; 2]> {
    let p = heads.dnet.probabilities(program)?;
    if p.len() != 1 {
        return Err(HlsError::shape("coarse_logits", format!("expected one program vector, got {}", p.len())));
    }
    Ok(p[0])
}

/// Independent `(p_nonvul, p_vul)` for each row of `[L × d_h]`.
pub fn fine_logits<S: Scalar>(statements: &Tensor<S>, heads: &DetectionHeads<S>) -> Result<Vec<[S; 2]>> {
    if statements.shape().len() != 2 || statements.rows() == 0 {
        return Err(HlsError::shape("fine_logits", "expected L ≥ 1 statement rows"));
    }
    heads.statement.probabilities(statements)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLossConfig {
    pub lambda_fine: f64,
    /// Weights of classes (0, 1) in the coarse cross-entropy.
    #[serde(default)]
    pub class_weights: Option<[f64; 2]>,
}

impl Default for FinetuneLossConfig {
    fn default() -> Self {
        FinetuneLossConfig {
            lambda_fine: DEFAULT_LAMBDA_FINE,
            class_weights: None,
        }
    }
}

/// `n / (2·n_c)` per class; a missing class gets weight 1.
pub fn inverse_frequency_weights(labels: &[u8]) -> [f64; 2] {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let w = |c: f64| if c == 0.0 { 1.0 } else { n / (2.0 * c) };
    [w(n - pos), w(pos)]
}

#[derive(Clone, Copy, Debug)]
pub struct FinetuneLoss {
    pub loss: Var,
    pub coarse: Var,
    /// `None` when the batch has no vulnerable sample.
    pub fine: Option<Var>,
    pub fine_statements: usize,
}

/// `CE_coarse + λ·CE_fine`. The coarse term is the (optionally class
/// weighted) mean over the batch; the fine term is the mean over every
/// retained statement of the label-1 samples, target 1 on labelled lines.
pub fn finetune_loss<S: Scalar>(
    g: &mut Graph<S>,
    batch: &[&EncodedSample],
    det: &Detector<S>,
    cfg: &FinetuneLossConfig,
) -> Result<FinetuneLoss> {
    if batch.is_empty() {
        return Err(HlsError::shape("finetune_loss", "empty batch"));
    }
    let vars = det.encoder.forward(g, batch)?;
    let programs: Vec<Var> = vars.iter().map(|v| v.program).collect();
    let programs = g.concat_rows(&programs)?;
    let logits = det.heads.dnet.logits(g, programs)?;
    let labels: Vec<usize> = batch.iter().map(|s| usize::from(s.label == 1)).collect();
    let cw = cfg.class_weights.map(|w| [lit::<S>(w[0]), lit(w[1])]);
    let coarse = g.cross_entropy(logits, &labels, cw.as_ref().map(|w| &w[..]))?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, v) in batch.iter().zip(&vars) {
        if s.label == 1 {
            rows.push(v.statements);
            targets.extend(s.line_labels.iter().map(|&b| usize::from(b)));
        }
    }
    if rows.is_empty() || cfg.lambda_fine == 0.0 {
        return Ok(FinetuneLoss {
            loss: coarse,
            coarse,
            fine: None,
            fine_statements: 0,
        });
    }
    let stmts = g.concat_rows(&rows)?;
    let fl = det.heads.statement.logits(g, stmts)?;
    let fine = g.cross_entropy(fl, &targets, None)?;
    let scaled = g.scale(fine, lit(cfg.lambda_fine));
    let loss = g.add(coarse, scaled)?;
    Ok(FinetuneLoss {
        loss,
        coarse,
        fine: Some(fine),
        fine_statements: targets.len(),
    })
}

/// Statement indices ordered by descending probability; equal
/// probabilities keep ascending index order.
pub fn rank_statements(p_vul: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p_vul.len()).collect();
    idx.sort_by(|&a, &b| p_vul[b].total_cmp(&p_vul[a]).then(a.cmp(&b)));
    idx
}

fn report_from<S: Scalar>(
    enc: &EncodedSample,
    program: &Tensor<S>,
    statements: &Tensor<S>,
    heads: &DetectionHeads<S>,
    k_percent: f64,
) -> Result<PredictionReport> {
    let p_vul = coarse_logits(program, heads)?[1].to_f64_lossless();
    let coarse_label = u8::from(p_vul >= heads.threshold);
    let num_lines = enc.num_lines();
    let mut scores = Vec::new();
    if coarse_label == 1 {
        let probs: Vec<f64> = fine_logits(statements, heads)?
            .iter()
            .map(|p| p[1].to_f64_lossless())
            .collect();
        scores = rank_statements(&probs)
            .into_iter()
            .map(|i| StatementScore {
                line: enc.line_numbers[i],
                p_vul: probs[i],
            })
            .collect();
    }
    let top_k_lines = scores
        .iter()
        .take(topk_count(num_lines, k_percent))
        .map(|s| s.line)
        .collect();
    Ok(PredictionReport {
        id: enc.id.clone(),
        p_vul,
        coarse_label,
        num_lines,
        retained_lines: enc.line_numbers.clone(),
        statements: scores,
        top_k_lines,
    })
}

/// Gated prediction for one sample: statement scores are computed and
/// ranked only when the coarse head says vulnerable.
pub fn predict<S: Scalar>(enc: &EncodedSample, det: &Detector<S>, k_percent: f64) -> Result<PredictionReport> {
    predict_batch(std::slice::from_ref(enc), det, k_percent, 1).map(|mut v| v.remove(0))
}

/// [`predict`] over many samples, `batch_size` per forward pass, batches in
/// parallel. The output order follows `samples`.
pub fn predict_batch<S: Scalar>(
    samples: &[EncodedSample],
    det: &Detector<S>,
    k_percent: f64,
    batch_size: usize,
) -> Result<Vec<PredictionReport>> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(HlsError::Config(format!("k must lie in (0, 100], got {k_percent}")));
    }
    let chunks: Vec<Result<Vec<PredictionReport>>> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&EncodedSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let vars = det.encoder.forward(&mut g, &refs)?;
            chunk
                .iter()
                .zip(vars)
                .map(|(enc, v)| report_from(enc, &g.tensor(v.program), &g.tensor(v.statements), &det.heads, k_percent))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Coarse confusion counts of `reports` against `samples`.
pub fn coarse_counts(reports: &[PredictionReport], samples: &[EncodedSample]) -> ConfusionCounts {
    ConfusionCounts::from_pairs(reports.iter().zip(samples).map(|(r, s)| (r.coarse_label == 1, s.label == 1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    #[serde(default)]
    pub loss: FinetuneLossConfig,
    /// Keep encoder weights fixed and train only the heads.
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Stop after this many epochs without an evaluation F1 improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl FinetuneSchedule {
    pub fn new(epochs: usize, seed: u64) -> Self {
        FinetuneSchedule {
            epochs,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed,
            loss: FinetuneLossConfig::default(),
            freeze_encoder: false,
            patience: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval_f1: f64,
    pub improved: bool,
}

/// Shuffled batches of epoch `epoch`.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, RNG_BATCH, epoch as u64));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One optimisation step on `batch`; returns the loss record.
pub fn finetune_step<S: Scalar>(
    batch: &[&EncodedSample],
    det: &mut Detector<S>,
    schedule: &FinetuneSchedule,
    state: &mut TrainState<S>,
) -> Result<LossRecord> {
    let step = state.step;
    let mut g = Graph::training(derived_rng(schedule.seed, RNG_DROPOUT, step as u64));
    let out = finetune_loss(&mut g, batch, det, &schedule.loss)?;
    let value = g.scalar_value(out.loss).to_f64_lossless();
    check_finite(value, step)?;
    g.backward(out.loss)?;
    det.zero_grads();
    det.accumulate_grads(&g)?;
    adamw_step(det, &mut state.optimizer)?;
    det.zero_grads();
    state.step += 1;
    Ok(LossRecord {
        step,
        phase: Phase::Finetune,
        loss: value,
        loss_per_token: value,
    })
}

/// Trains from `state.epoch` to `schedule.epochs`. After every epoch the
/// coarse F1 on `eval` (or on `train` when `eval` is empty) is computed;
/// `on_epoch` receives the detector, the state and whether this epoch set
/// a new best F1, so the caller can persist the best and latest weights.
/// Batches and dropout derive from `(seed, epoch)` and `(seed, step)`, so a
/// run resumed from a stored state reproduces the uninterrupted one.
pub fn finetune_run<S: Scalar>(
    train: &[EncodedSample],
    eval: &[EncodedSample],
    det: &mut Detector<S>,
    schedule: &FinetuneSchedule,
    state: &mut TrainState<S>,
    mut on_epoch: impl FnMut(&Detector<S>, &TrainState<S>, &EpochSummary) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    if train.is_empty() {
        return Err(HlsError::EmptyCorpus);
    }
    if schedule.batch_size == 0 {
        return Err(HlsError::Config("batch_size must be positive".into()));
    }
    for s in train.iter().chain(eval) {
        det.encoder.check_sample(s)?;
    }
    let monitor = if eval.is_empty() {
        log::warn!("evaluation split is empty; monitoring F1 on the training split");
        train
    } else {
        eval
    };
    if schedule.freeze_encoder {
        det.encoder.set_trainable(false);
    }
    let result = run_epochs(train, monitor, det, schedule, state, &mut on_epoch);
    if schedule.freeze_encoder {
        det.encoder.set_trainable(true);
    }
    result
}

fn run_epochs<S: Scalar>(
    train: &[EncodedSample],
    monitor: &[EncodedSample],
    det: &mut Detector<S>,
    schedule: &FinetuneSchedule,
    state: &mut TrainState<S>,
    on_epoch: &mut impl FnMut(&Detector<S>, &TrainState<S>, &EpochSummary) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    let mut summaries = Vec::new();
    while state.epoch < schedule.epochs {
        if let (Some(p), Some((_, best_epoch))) = (schedule.patience, state.best) {
            if state.epoch > best_epoch + p {
                log::info!("early stop at epoch {}: no improvement since epoch {best_epoch}", state.epoch);
                break;
            }
        }
        let epoch = state.epoch;
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), schedule.batch_size, schedule.seed, epoch);
        for idx in &batches {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &train[i]).collect();
            let rec = finetune_step(&batch, det, schedule, state)?;
            total += rec.loss;
            state.history.push(rec);
        }
        let reports = predict_batch(monitor, det, 100.0, schedule.batch_size)?;
        let f1 = classification_metrics(&coarse_counts(&reports, monitor)).f1;
        let improved = state.best.is_none_or(|(b, _)| f1 > b);
        if improved {
            state.best = Some((f1, epoch));
        }
        state.epoch += 1;
        let summary = EpochSummary {
            epoch,
            mean_loss: total / batches.len() as f64,
            eval_f1: f1,
            improved,
        };
        log::info!("epoch {epoch} loss {:.4} eval F1 {f1:.4}", summary.mean_loss);
        on_epoch(det, state, &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}
