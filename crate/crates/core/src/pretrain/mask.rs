use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HlsError, Result};
use crate::segmenter::{EncodedSample, MASK, NUM_RESERVED};

pub const MASK_FRACTION: f64 = 0.15;
pub const P_MASK_ALL: f64 = 0.8;
pub const P_RANDOMIZE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    MaskAll,
    Randomize,
    Keep,
}

fn draw_action<R: Rng + ?Sized>(rng: &mut R) -> MaskAction {
    let u: f64 = rng.random();
    if u < P_MASK_ALL {
        MaskAction::MaskAll
    } else if u < P_MASK_ALL + P_RANDOMIZE {
        MaskAction::Randomize
    } else {
        MaskAction::Keep
    }
}

fn random_id<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize) -> usize {
    rng.random_range(NUM_RESERVED..vocab_size)
}

fn check_vocab(vocab_size: usize) -> Result<()> {
    if vocab_size <= NUM_RESERVED {
        return Err(HlsError::Config(format!("vocab_size {vocab_size} has no non-reserved ids")));
    }
    Ok(())
}

/// Number of items selected out of `total` at `fraction`: rounded, at least
/// one when anything is available.
pub fn selection_count(total: usize, fraction: f64) -> usize {
    if total == 0 {
        return 0;
    }
    ((fraction * total as f64).round() as usize).clamp(1, total)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedLine {
    /// Index into the sample's retained lines.
    pub line: usize,
    pub action: MaskAction,
    pub original: Vec<usize>,
    /// Token ids written into the line (equal to `original` for `Keep`).
    pub replacement: Vec<usize>,
}

/// Selected statements of one sample with their actions, in line order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MspMaskPlan {
    pub seed: u64,
    pub lines: Vec<MaskedLine>,
}

impl MspMaskPlan {
    pub fn selected_lines(&self) -> Vec<usize> {
        self.lines.iter().map(|l| l.line).collect()
    }
}

pub fn make_mask_plan(enc: &EncodedSample, vocab_size: usize, seed: u64) -> Result<MspMaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = make_mask_plan_with(enc, vocab_size, MASK_FRACTION, &mut rng)?;
    plan.seed = seed;
    Ok(plan)
}

/// Selects `round(fraction·L)` lines (at least one) without replacement and
/// draws an action for each.
pub fn make_mask_plan_with<R: Rng + ?Sized>(
    enc: &EncodedSample,
    vocab_size: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<MspMaskPlan> {
    check_vocab(vocab_size)?;
    let l = enc.num_lines();
    if l == 0 {
        return Err(HlsError::EmptyFunction(enc.id.clone()));
    }
    let mut picked = sample(rng, l, selection_count(l, fraction)).into_vec();
    picked.sort_unstable();
    let lines = picked
        .into_iter()
        .map(|line| {
            let original = enc.line_tokens(line).to_vec();
            let action = draw_action(rng);
            let replacement = match action {
                MaskAction::MaskAll => vec![MASK; original.len()],
                MaskAction::Randomize => original.iter().map(|_| random_id(rng, vocab_size)).collect(),
                MaskAction::Keep => original.clone(),
            };
            MaskedLine {
                line,
                action,
                original,
                replacement,
            }
        })
        .collect();
    Ok(MspMaskPlan { seed: 0, lines })
}

/// The masked input `x^mask`; spans, line count and length are unchanged.
pub fn apply_mask_plan(enc: &EncodedSample, plan: &MspMaskPlan) -> Result<EncodedSample> {
    let mut out = enc.clone();
    for m in &plan.lines {
        let &(s, e) = enc
            .line_spans
            .get(m.line)
            .ok_or_else(|| HlsError::shape("apply_mask_plan", format!("line {} out of range", m.line)))?;
        if e - s != m.replacement.len() || enc.token_ids[s..e] != m.original[..] {
            return Err(HlsError::shape("apply_mask_plan", format!("plan does not match line {}", m.line)));
        }
        out.token_ids[s..e].copy_from_slice(&m.replacement);
    }
    Ok(out)
}

/// Token-level masking for the MLM objective.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmPlan {
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
    pub replacements: Vec<usize>,
}

/// Selects `round(fraction·(n−1))` token positions (never the [CLS] at 0),
/// each masked, randomised or kept with probabilities 0.8/0.1/0.1.
pub fn make_mlm_plan<R: Rng + ?Sized>(enc: &EncodedSample, vocab_size: usize, fraction: f64, rng: &mut R) -> Result<MlmPlan> {
    check_vocab(vocab_size)?;
    let candidates = enc.n().saturating_sub(1);
    if candidates == 0 {
        log::warn!("sample {:?} has no maskable tokens; skipped", enc.id);
        return Ok(MlmPlan::default());
    }
    let mut positions: Vec<usize> = sample(rng, candidates, selection_count(candidates, fraction))
        .into_iter()
        .map(|p| p + 1)
        .collect();
    positions.sort_unstable();
    let originals: Vec<usize> = positions.iter().map(|&p| enc.token_ids[p]).collect();
    let replacements = originals
        .iter()
        .map(|&o| match draw_action(rng) {
            MaskAction::MaskAll => MASK,
            MaskAction::Randomize => random_id(rng, vocab_size),
            MaskAction::Keep => o,
        })
        .collect();
    Ok(MlmPlan {
        positions,
        originals,
        replacements,
    })
}

pub fn apply_mlm_plan(enc: &EncodedSample, plan: &MlmPlan) -> EncodedSample {
    let mut out = enc.clone();
    for (&p, &r) in plan.positions.iter().zip(&plan.replacements) {
        out.token_ids[p] = r;
    }
    out
}
