//! Bookkeeping shared by pretraining and fine-tuning: per-step RNG
//! derivation, loss history, and resumable optimizer state.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::scalar::Scalar;
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::{AdamWConfig, OptimizerState};

/// RNG purposes; each gets its own key so streams never overlap.
pub(crate) const RNG_BATCH: u64 = 0x6261_7463;
pub(crate) const RNG_MASK: u64 = 0x6d61_736b;
pub(crate) const RNG_DROPOUT: u64 = 0x6472_6f70;

/// A generator that depends only on `(seed, purpose, index)`, so any step of
/// a run can be replayed without replaying the steps before it.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.rotate_left(32));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mlm,
    Msp,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Mlm => "mlm",
            Phase::Msp => "msp",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    /// Loss divided by the number of predicted tokens (MSP), or equal to
    /// `loss` where the objective is already a mean.
    pub loss_per_token: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub step: usize,
    pub epoch: usize,
    pub optimizer: OptimizerState<S>,
    pub history: Vec<LossRecord>,
    /// Best evaluation F1 seen so far and the epoch it was reached.
    pub best: Option<(f64, usize)>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    epoch: usize,
    t: u64,
    config: AdamWConfig,
    history: Vec<LossRecord>,
    best: Option<(f64, usize)>,
}

const STATE_KEY: &str = "train.state";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

impl<S: Scalar> TrainState<S> {
    pub fn new(config: AdamWConfig) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            optimizer: OptimizerState::new(config),
            history: Vec::new(),
            best: None,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn store(&self, archive: &mut TensorArchive) -> Result<()> {
        let meta = StateMeta {
            step: self.step,
            epoch: self.epoch,
            t: self.optimizer.t,
            config: self.optimizer.config,
            history: self.history.clone(),
            best: self.best,
        };
        archive.set_meta(STATE_KEY, serde_json::to_string(&meta)?);
        for (name, m) in &self.optimizer.m {
            archive.insert_raw(&format!("{M_PREFIX}{name}"), &[m.len()], m);
        }
        for (name, v) in &self.optimizer.v {
            archive.insert_raw(&format!("{V_PREFIX}{name}"), &[v.len()], v);
        }
        Ok(())
    }

    /// `None` when the archive holds no training state.
    pub fn restore(archive: &TensorArchive) -> Result<Option<Self>> {
        let Some(meta) = archive.meta(STATE_KEY) else {
            return Ok(None);
        };
        let meta: StateMeta = serde_json::from_str(meta)?;
        let mut optimizer = OptimizerState::new(meta.config);
        optimizer.t = meta.t;
        for name in archive.tensors.keys() {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                optimizer.m.insert(p.to_string(), archive.raw(name).expect("listed"));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                optimizer.v.insert(p.to_string(), archive.raw(name).expect("listed"));
            }
        }
        Ok(Some(TrainState {
            step: meta.step,
            epoch: meta.epoch,
            optimizer,
            history: meta.history,
            best: meta.best,
        }))
    }
}

/// Whether an archive tensor name belongs to the optimizer rather than a
/// model.
pub fn is_optimizer_entry(name: &str) -> bool {
    name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX)
}

pub fn loss_csv(history: &[LossRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "phase", "loss", "loss_per_token"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.phase.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.loss_per_token),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HlsError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    std::fs::File::create(path)?.write_all(loss_csv(history)?.as_bytes())?;
    Ok(())
}

pub(crate) fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        log::error!("non-finite loss {loss} at step {step}; update skipped");
        Err(HlsError::Diverged { step })
    }
}
