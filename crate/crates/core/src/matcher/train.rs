use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionTriplets, MatcherError, MatcherModel, DEFAULT_MARGIN};
use crate::corpus::{CaptionPair, Corpus};
use crate::features::FeatureMatrix;

/// Token rows, positive image row, negative image row.
type BatchRow = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Caption pairs per gradient step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.5,
            seed: 0,
            margin: DEFAULT_MARGIN,
        }
    }
}

/// Mean per-token hinge loss of every epoch, measured before each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Caption pairs together with the frozen features they index.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub pairs: &'a [CaptionPair],
    pub token_feats: &'a FeatureMatrix,
    /// Feature rows of each sentence, indexed by sentence id.
    pub sentence_rows: Vec<Range<usize>>,
    pub image_feats: &'a FeatureMatrix,
}

impl<'a> TrainingData<'a> {
    /// Token-level data: `token_feats` holds one row per corpus token in corpus order.
    pub fn token_level(
        pairs: &'a [CaptionPair],
        captions: &Corpus,
        token_feats: &'a FeatureMatrix,
        image_feats: &'a FeatureMatrix,
    ) -> Self {
        let offsets = captions.row_offsets();
        let sentence_rows = offsets.windows(2).map(|w| w[0]..w[1]).collect();
        Self {
            pairs,
            token_feats,
            sentence_rows,
            image_feats,
        }
    }

    /// Sentence-level data: `cls_feats` holds one row per sentence.
    pub fn sentence_level(
        pairs: &'a [CaptionPair],
        cls_feats: &'a FeatureMatrix,
        image_feats: &'a FeatureMatrix,
    ) -> Self {
        Self {
            pairs,
            token_feats: cls_feats,
            sentence_rows: (0..cls_feats.rows()).map(|i| i..i + 1).collect(),
            image_feats,
        }
    }

    fn validate(&self) -> Result<Vec<usize>, MatcherError> {
        let mut images = Vec::with_capacity(self.pairs.len());
        for pair in self.pairs {
            let has_rows = usize::try_from(pair.sentence_id)
                .ok()
                .and_then(|i| self.sentence_rows.get(i))
                .is_some_and(|r| !r.is_empty() && r.end <= self.token_feats.rows());
            if !has_rows {
                return Err(MatcherError::MissingFeatures {
                    sentence_id: pair.sentence_id,
                });
            }
            if pair.image_id >= self.image_feats.rows() {
                return Err(MatcherError::MissingImage {
                    image_id: pair.image_id,
                    rows: self.image_feats.rows(),
                });
            }
            images.push(pair.image_id);
        }
        images.sort_unstable();
        images.dedup();
        if images.len() < 2 {
            return Err(MatcherError::TooFewImages(images.len()));
        }
        Ok(images)
    }
}

/// Uniform draw over `images` (sorted, distinct) excluding `positive`.
fn sample_negative<R: Rng>(images: &[usize], positive: usize, rng: &mut R) -> usize {
    let skip = images.binary_search(&positive).ok();
    let k = rng.gen_range(0..images.len() - usize::from(skip.is_some()));
    match skip {
        Some(s) if k >= s => images[k + 1],
        _ => images[k],
    }
}

/// Trains both heads with mini-batch SGD on the caption hinge loss.
///
/// Each step draws one negative image per caption, uniformly from the other
/// training images. The update uses the gradient averaged over the batch's
/// tokens. Only the two heads change; the input features are frozen.
pub fn train(
    model: &MatcherModel,
    data: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<(MatcherModel, TrainReport), MatcherError> {
    if !(config.margin > 0.0 && config.margin.is_finite()) {
        return Err(MatcherError::BadMargin(config.margin));
    }
    if data.pairs.is_empty() {
        return Err(MatcherError::EmptyBatch);
    }
    let images = data.validate()?;
    let mut model = model.clone();
    model.margin = config.margin;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.pairs.len()).collect();
    let batch_size = config.batch_size.max(1);
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        steps: 0,
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for (batch, chunk) in order.chunks(batch_size).enumerate() {
            let mut rows: Vec<BatchRow> = Vec::with_capacity(chunk.len());
            for &p in chunk {
                let pair = data.pairs[p];
                let range = data.sentence_rows[pair.sentence_id as usize].clone();
                let tokens = range.map(|r| data.token_feats.row_f64(r)).collect();
                let negative = sample_negative(&images, pair.image_id, &mut rng);
                rows.push((
                    tokens,
                    data.image_feats.row_f64(pair.image_id),
                    data.image_feats.row_f64(negative),
                ));
            }
            let captions: Vec<CaptionTriplets<'_>> = rows
                .iter()
                .map(|(tokens, pos, neg)| CaptionTriplets {
                    tokens: tokens.iter().map(Vec::as_slice).collect(),
                    positive: pos,
                    negative: neg,
                })
                .collect();
            let n_tokens: usize = captions.iter().map(|c| c.tokens.len()).sum();
            let (loss, grads) = model.caption_loss_and_grad(&captions)?;
            if !loss.is_finite() {
                return Err(MatcherError::NonFinite {
                    what: "loss",
                    epoch,
                    batch,
                });
            }
            if !grads.w_mlp.is_finite() || !grads.x_mlp.is_finite() {
                return Err(MatcherError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch,
                });
            }
            let step = config.learning_rate / n_tokens as f64;
            model.w_mlp.descend(&grads.w_mlp, step);
            model.x_mlp.descend(&grads.x_mlp, step);
            if !model.w_mlp.is_finite() || !model.x_mlp.is_finite() {
                return Err(MatcherError::NonFinite {
                    what: "weight",
                    epoch,
                    batch,
                });
            }
            epoch_loss += loss;
            epoch_tokens += n_tokens;
            report.steps += 1;
        }
        report.epoch_losses.push(epoch_loss / epoch_tokens as f64);
    }
    Ok((model, report))
}
