//! Checkpoint directories: model configuration, vocabulary, weights and
//! (optionally) the training state needed to resume.
//!
//! ```text
//! <dir>/manifest.txt   tensor manifest and metadata
//! <dir>/weights.bin    tensor data
//! <dir>/vocab.txt      one token per line
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::finetune::{DetectionHeads, Detector};
use crate::hls_model::{HlsModel, ModelConfig};
use crate::pretrain::{MspConfig, PretrainModel};
use crate::scalar::Scalar;
use crate::segmenter::Vocab;
use crate::tensor::checkpoint::{ckpt_err, TensorArchive};
use crate::train::TrainState;

pub const VOCAB_FILE: &str = "vocab.txt";
const KIND_KEY: &str = "kind";
const CONFIG_KEY: &str = "model.config";
const MSP_KEY: &str = "msp.config";
const HEADS_KEY: &str = "heads.config";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Encoder with MSP decoder and MLM head.
    Pretrain,
    /// Encoder with detection heads.
    Detector,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Pretrain => "pretrain",
            CheckpointKind::Detector => "detector",
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HeadsMeta {
    head_hidden: usize,
    threshold: f64,
}

fn base_archive<S: Scalar>(kind: CheckpointKind, config: &ModelConfig, state: Option<&TrainState<S>>) -> Result<TensorArchive> {
    let mut a = TensorArchive::default();
    a.set_meta(KIND_KEY, kind);
    a.set_meta(CONFIG_KEY, serde_json::to_string(config)?);
    if let Some(s) = state {
        s.store(&mut a)?;
    }
    Ok(a)
}

fn write(dir: &Path, archive: &TensorArchive, vocab: &Vocab) -> Result<()> {
    archive.save(dir)?;
    vocab.save(&dir.join(VOCAB_FILE))
}

struct Opened {
    archive: TensorArchive,
    vocab: Vocab,
    config: ModelConfig,
    kind: CheckpointKind,
}

fn open(dir: &Path) -> Result<Opened> {
    let archive = TensorArchive::load(dir)?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE)).map_err(|e| ckpt_err(dir, format!("vocabulary: {e}")))?;
    let kind = archive
        .meta(KIND_KEY)
        .and_then(|k| serde_json::from_value(serde_json::Value::String(k.to_string())).ok())
        .ok_or_else(|| ckpt_err(dir, "missing or unknown checkpoint kind"))?;
    let config: ModelConfig = serde_json::from_str(
        archive
            .meta(CONFIG_KEY)
            .ok_or_else(|| ckpt_err(dir, "missing model configuration"))?,
    )?;
    config.validate()?;
    if config.encoder.vocab_size != vocab.len() {
        return Err(ckpt_err(
            dir,
            format!("model expects {} tokens, vocabulary has {}", config.encoder.vocab_size, vocab.len()),
        ));
    }
    Ok(Opened {
        archive,
        vocab,
        config,
        kind,
    })
}

fn wrap(dir: &Path, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        HlsError::Checkpoint { msg, .. } => ckpt_err(dir, msg),
        other => other,
    })
}

pub fn checkpoint_kind(dir: &Path) -> Result<CheckpointKind> {
    Ok(open(dir)?.kind)
}

pub fn save_pretrain<S: Scalar>(
    dir: &Path,
    vocab: &Vocab,
    pm: &PretrainModel<S>,
    msp: &MspConfig,
    state: Option<&TrainState<S>>,
) -> Result<()> {
    let mut a = base_archive(CheckpointKind::Pretrain, &pm.encoder.config, state)?;
    a.set_meta(MSP_KEY, serde_json::to_string(msp)?);
    a.insert_params("", pm);
    write(dir, &a, vocab)
}

pub struct PretrainCheckpoint<S> {
    pub vocab: Vocab,
    pub model: PretrainModel<S>,
    pub msp: MspConfig,
    pub state: Option<TrainState<S>>,
}

pub fn load_pretrain<S: Scalar>(dir: &Path) -> Result<PretrainCheckpoint<S>> {
    let o = open(dir)?;
    if o.kind != CheckpointKind::Pretrain {
        return Err(ckpt_err(dir, format!("expected a pretrain checkpoint, found {}", o.kind)));
    }
    let msp: MspConfig = match o.archive.meta(MSP_KEY) {
        Some(m) => serde_json::from_str(m)?,
        None => MspConfig::default(),
    };
    let mut model = PretrainModel::new(o.config, &msp, 0)?;
    wrap(dir, o.archive.load_params("", &mut model))?;
    Ok(PretrainCheckpoint {
        vocab: o.vocab,
        model,
        msp,
        state: TrainState::restore(&o.archive)?,
    })
}

pub fn save_detector<S: Scalar>(dir: &Path, vocab: &Vocab, det: &Detector<S>, state: Option<&TrainState<S>>) -> Result<()> {
    let mut a = base_archive(CheckpointKind::Detector, &det.encoder.config, state)?;
    let heads = HeadsMeta {
        head_hidden: det.heads.head_hidden(),
        threshold: det.heads.threshold,
    };
    a.set_meta(HEADS_KEY, serde_json::to_string(&heads)?);
    a.insert_params("", det);
    write(dir, &a, vocab)
}

pub struct DetectorCheckpoint<S> {
    pub vocab: Vocab,
    pub detector: Detector<S>,
    pub state: Option<TrainState<S>>,
}

pub fn load_detector<S: Scalar>(dir: &Path) -> Result<DetectorCheckpoint<S>> {
    let o = open(dir)?;
    if o.kind != CheckpointKind::Detector {
        return Err(ckpt_err(dir, format!("expected a detector checkpoint, found {}", o.kind)));
    }
    let meta: HeadsMeta = serde_json::from_str(
        o.archive
            .meta(HEADS_KEY)
            .ok_or_else(|| ckpt_err(dir, "missing head configuration"))?,
    )?;
    let encoder = HlsModel::new(o.config, 0)?;
    let mut heads = DetectionHeads::new(encoder.hidden(), meta.head_hidden, 0);
    heads.threshold = meta.threshold;
    let mut detector = Detector { encoder, heads };
    wrap(dir, o.archive.load_params("", &mut detector))?;
    Ok(DetectorCheckpoint {
        vocab: o.vocab,
        detector,
        state: TrainState::restore(&o.archive)?,
    })
}

/// The encoder of a checkpoint of either kind, without heads or state.
pub fn load_encoder<S: Scalar>(dir: &Path) -> Result<(Vocab, HlsModel<S>)> {
    let o = open(dir)?;
    let mut encoder = HlsModel::new(o.config, 0)?;
    wrap(dir, o.archive.load_params("encoder", &mut encoder))?;
    Ok((o.vocab, encoder))
}
