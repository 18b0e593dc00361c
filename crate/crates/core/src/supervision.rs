//! Token masking and the losses of visually supervised language modelling.
//!
//! The language model itself lives elsewhere; these functions score its
//! output distributions. Losses are sums over the covered positions.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenizedSentence;
use crate::index::VokenAssignment;
use crate::revokenize::SENTINEL_VOKEN;
use crate::seed::item_rng;

pub const DEFAULT_MASK_RATIO: f64 = 0.15;
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Allowed deviation of a probability row's sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("mask ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("{rows} distribution rows for {tokens} tokens")]
    RowCount { rows: usize, tokens: usize },
    #[error("position {position}: distribution has {len} entries, vocabulary has {vocab}")]
    RowLength {
        position: usize,
        len: usize,
        vocab: usize,
    },
    #[error("position {position}: distribution sums to {sum}")]
    NotNormalized { position: usize, sum: f64 },
    #[error("position {position}: target {target} has zero probability")]
    ZeroProbability { position: usize, target: usize },
    #[error("position {position}: target {target} outside distribution of {len} entries")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        len: usize,
    },
    #[error("masked position {position} outside sentence of {len} tokens")]
    BadMaskPosition { position: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    MaskSymbol,
    RandomToken,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub sentence_id: u64,
    /// Ascending token indices.
    pub masked_positions: Vec<usize>,
    /// Action per masked position, aligned with `masked_positions`.
    pub replacement: Vec<MaskAction>,
}

impl MaskSet {
    pub fn contains(&self, position: usize) -> bool {
        self.masked_positions.binary_search(&position).is_ok()
    }

    pub fn len(&self) -> usize {
        self.masked_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_positions.is_empty()
    }
}

/// Number of positions masked in a sentence of `len` tokens: `ceil(ratio * len)`.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    // The epsilon keeps products like 0.15 * 20 = 3.0000000000000004 at 3.
    let k = (ratio * len as f64 - 1e-9).ceil().max(0.0) as usize;
    k.min(len)
}

/// Picks `ceil(ratio * len)` positions uniformly without replacement and an
/// 80/10/10 mask/random/keep action for each. Deterministic in `seed`.
pub fn mask_tokens(
    sentence: &TokenizedSentence,
    mask_ratio: f64,
    seed: u64,
) -> Result<MaskSet, LossError> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(LossError::BadRatio(mask_ratio));
    }
    let len = sentence.tokens.len();
    let mut rng = item_rng(seed, sentence.sentence_id);
    let k = mask_count(mask_ratio, len);
    let mut masked_positions = sample(&mut rng, len, k).into_vec();
    masked_positions.sort_unstable();
    let replacement = masked_positions
        .iter()
        .map(|_| {
            let r: f64 = rng.gen();
            if r < 0.8 {
                MaskAction::MaskSymbol
            } else if r < 0.9 {
                MaskAction::RandomToken
            } else {
                MaskAction::Keep
            }
        })
        .collect();
    Ok(MaskSet {
        sentence_id: sentence.sentence_id,
        masked_positions,
        replacement,
    })
}

fn neg_log_prob(row: &[f64], target: usize, position: usize) -> Result<f64, LossError> {
    let sum: f64 = row.iter().sum();
    let normalized = (sum - 1.0).abs() <= NORMALIZATION_TOLERANCE;
    if !normalized {
        return Err(LossError::NotNormalized { position, sum });
    }
    let p = *row.get(target).ok_or(LossError::TargetOutOfRange {
        position,
        target,
        len: row.len(),
    })?;
    if p <= 0.0 {
        return Err(LossError::ZeroProbability { position, target });
    }
    Ok(-p.ln())
}

/// Negative log-likelihood of the true tokens at masked positions only.
/// `distributions` and `targets` hold one entry per sentence position.
pub fn mlm_loss(
    distributions: &[Vec<f64>],
    targets: &[u32],
    mask: &MaskSet,
) -> Result<f64, LossError> {
    if distributions.len() != targets.len() {
        return Err(LossError::RowCount {
            rows: distributions.len(),
            tokens: targets.len(),
        });
    }
    let mut total = 0.0;
    for &position in &mask.masked_positions {
        let row = distributions
            .get(position)
            .ok_or(LossError::BadMaskPosition {
                position,
                len: distributions.len(),
            })?;
        total += neg_log_prob(row, targets[position] as usize, position)?;
    }
    Ok(total)
}

/// Negative log-probability of every token's voken, masked or not. Sentinel
/// positions are skipped.
pub fn voken_cls_loss(
    distributions: &[Vec<f64>],
    assignment: &VokenAssignment,
    vocab_size: usize,
) -> Result<f64, LossError> {
    if distributions.len() != assignment.voken_ids.len() {
        return Err(LossError::RowCount {
            rows: distributions.len(),
            tokens: assignment.voken_ids.len(),
        });
    }
    let mut total = 0.0;
    for (position, (row, &voken)) in distributions.iter().zip(&assignment.voken_ids).enumerate() {
        if voken == SENTINEL_VOKEN {
            continue;
        }
        if row.len() != vocab_size {
            return Err(LossError::RowLength {
                position,
                len: row.len(),
                vocab: vocab_size,
            });
        }
        total += neg_log_prob(row, voken as usize, position)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mlm: f64,
    pub l_voken_cls: f64,
    pub lambda: f64,
    pub l_vlm: f64,
}

pub fn vlm_loss(l_voken_cls: f64, l_mlm: f64, lambda: f64) -> LossReport {
    LossReport {
        l_mlm,
        l_voken_cls,
        lambda,
        l_vlm: l_voken_cls + lambda * l_mlm,
    }
}
