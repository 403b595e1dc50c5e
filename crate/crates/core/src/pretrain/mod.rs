//! Self-supervised pretraining: token-level MLM for the token encoder, then
//! masked statement prediction (MSP) for the whole model.

mod decoder;
mod mask;
mod mlm;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::hls_model::{HlsModel, ModelConfig};
use crate::scalar::Scalar;
use crate::segmenter::EncodedSample;
use crate::tensor::{adamw_step, impl_parameters, AdamWConfig, Graph, Parameters};
use crate::train::{check_finite, derived_rng, LossRecord, Phase, TrainState, RNG_BATCH, RNG_DROPOUT, RNG_MASK};

pub use decoder::{msp_loss, msp_loss_batch, MspBatchLoss, MspConfig, MspDecoder, MspReduction, MAX_DECODE_LEN};
pub use mask::{
    apply_mask_plan, apply_mlm_plan, make_mask_plan, make_mask_plan_with, make_mlm_plan, selection_count, MaskAction,
    MaskedLine, MlmPlan, MspMaskPlan, MASK_FRACTION, P_MASK_ALL, P_RANDOMIZE,
};
pub use mlm::{mlm_loss, mlm_loss_batch, MlmHead};

/// Encoder plus both pretraining heads.
#[derive(Clone, Debug)]
pub struct PretrainModel<S> {
    pub encoder: HlsModel<S>,
    pub decoder: MspDecoder<S>,
    pub mlm: MlmHead<S>,
}

impl_parameters!(PretrainModel { encoder, decoder, mlm });

impl<S: Scalar> PretrainModel<S> {
    pub fn new(config: ModelConfig, msp: &MspConfig, seed: u64) -> Result<Self> {
        let encoder = HlsModel::new(config, seed)?;
        Ok(Self::with_encoder(encoder, msp, seed))
    }

    /// Fresh heads around an existing encoder.
    pub fn with_encoder(encoder: HlsModel<S>, msp: &MspConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let d = encoder.hidden();
        let v = encoder.config.encoder.vocab_size;
        PretrainModel {
            decoder: MspDecoder::new(d, v, msp.feed_statement, &mut rng),
            mlm: MlmHead::new(d, v, &mut rng),
            encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSchedule {
    pub mlm_steps: usize,
    pub msp_steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Invoke the checkpoint callback every this many steps; 0 disables it.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub msp: MspConfig,
    #[serde(default = "default_fraction")]
    pub mask_fraction: f64,
}

fn default_fraction() -> f64 {
    MASK_FRACTION
}

impl PretrainSchedule {
    pub fn new(mlm_steps: usize, msp_steps: usize, seed: u64) -> Self {
        PretrainSchedule {
            mlm_steps,
            msp_steps,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed,
            checkpoint_every: 0,
            msp: MspConfig::default(),
            mask_fraction: MASK_FRACTION,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.mlm_steps + self.msp_steps
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        if step < self.mlm_steps {
            Phase::Mlm
        } else {
            Phase::Msp
        }
    }
}

/// Sample indices of step `step`: the whole corpus when it fits in a batch,
/// otherwise a seeded draw without replacement.
pub(crate) fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = derived_rng(seed, RNG_BATCH, step as u64);
    let mut idx = sample(&mut rng, n, batch_size.max(1)).into_vec();
    idx.sort_unstable();
    idx
}

/// One optimisation step; returns the loss record without touching
/// `state.history`.
pub fn pretrain_step<S: Scalar>(
    samples: &[EncodedSample],
    pm: &mut PretrainModel<S>,
    schedule: &PretrainSchedule,
    state: &mut TrainState<S>,
) -> Result<LossRecord> {
    let step = state.step;
    let phase = schedule.phase_at(step);
    let idx = batch_indices(samples.len(), schedule.batch_size, schedule.seed, step);
    let vocab = pm.encoder.config.encoder.vocab_size;
    let mut mask_rng = derived_rng(schedule.seed, RNG_MASK, step as u64);
    let mut g = Graph::training(derived_rng(schedule.seed, RNG_DROPOUT, step as u64));

    let (loss, per_token) = match phase {
        Phase::Mlm => {
            let plans = idx
                .iter()
                .map(|&i| make_mlm_plan(&samples[i], vocab, schedule.mask_fraction, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let masked: Vec<EncodedSample> = idx.iter().zip(&plans).map(|(&i, p)| apply_mlm_plan(&samples[i], p)).collect();
            let (loss, _) = mlm_loss_batch(
                &mut g,
                &masked.iter().collect::<Vec<_>>(),
                &plans.iter().collect::<Vec<_>>(),
                &pm.encoder.te,
                &pm.encoder.config.encoder,
                &pm.mlm,
            )?;
            let v = g.scalar_value(loss).to_f64_lossless();
            (loss, v)
        }
        _ => {
            let plans = idx
                .iter()
                .map(|&i| make_mask_plan_with(&samples[i], vocab, schedule.mask_fraction, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let masked = idx
                .iter()
                .zip(&plans)
                .map(|(&i, p)| apply_mask_plan(&samples[i], p))
                .collect::<Result<Vec<_>>>()?;
            let out = msp_loss_batch(
                &mut g,
                &masked.iter().collect::<Vec<_>>(),
                &plans.iter().collect::<Vec<_>>(),
                &pm.encoder,
                &pm.decoder,
                &schedule.msp,
            )?;
            let per_token = g.scalar_value(out.total).to_f64_lossless() / out.tokens.max(1) as f64;
            (out.loss, per_token)
        }
    };
    let value = g.scalar_value(loss).to_f64_lossless();
    check_finite(value, step)?;
    g.backward(loss)?;
    pm.zero_grads();
    pm.accumulate_grads(&g)?;
    adamw_step(pm, &mut state.optimizer)?;
    pm.zero_grads();
    state.step += 1;
    Ok(LossRecord {
        step,
        phase,
        loss: value,
        loss_per_token: per_token,
    })
}

/// Runs the schedule from `state.step` to the end: MLM steps first, then MSP
/// steps. Every step's batch, masks and dropout derive from
/// `(schedule.seed, step)`, so a run resumed from a stored state continues
/// exactly as the uninterrupted one. On a non-finite loss the run stops with
/// [`HlsError::Diverged`] before updating, leaving `pm` at the last good
/// weights.
pub fn pretrain_run<S: Scalar>(
    samples: &[EncodedSample],
    pm: &mut PretrainModel<S>,
    schedule: &PretrainSchedule,
    state: &mut TrainState<S>,
    mut on_checkpoint: impl FnMut(&PretrainModel<S>, &TrainState<S>) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(HlsError::EmptyCorpus);
    }
    if schedule.batch_size == 0 {
        return Err(HlsError::Config("batch_size must be positive".into()));
    }
    for s in samples {
        pm.encoder.check_sample(s)?;
    }
    while state.step < schedule.total_steps() {
        let rec = pretrain_step(samples, pm, schedule, state)?;
        log::info!("step {} {} loss {:.4} per-token {:.4}", rec.step, rec.phase, rec.loss, rec.loss_per_token);
        state.history.push(rec);
        if schedule.checkpoint_every > 0 && state.step % schedule.checkpoint_every == 0 {
            on_checkpoint(pm, state)?;
        }
    }
    Ok(())
}
