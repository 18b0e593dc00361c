//! Contextual token-image matching.
//!
//! Frozen token hidden states and image embeddings are each passed through a
//! small MLP and L2-normalized; relevance is the inner product of the two unit
//! vectors and therefore lies in `[-1, 1]`. The heads are trained with a
//! margin ranking (hinge) loss against a randomly drawn negative image.

mod mlp;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mlp::{MlpParams, HIDDEN_DIM, OUTPUT_DIM};
pub use train::{train, TrainConfig, TrainReport, TrainingData};

/// Default hinge margin.
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MatcherError {
    #[error("{side} input has dimension {got}, model expects {expected}")]
    Dimension {
        side: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} projection has zero norm before normalization")]
    DegenerateProjection(&'static str),
    #[error("model is {actual:?}, operation requires {required:?}")]
    ModeMismatch {
        required: MatcherMode,
        actual: MatcherMode,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("negative image equals the positive image")]
    NegativeEqualsPositive,
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("non-finite {what} in epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("training set needs at least two distinct images, found {0}")]
    TooFewImages(usize),
    #[error("caption pair references sentence {sentence_id} with no feature rows")]
    MissingFeatures { sentence_id: u64 },
    #[error("caption pair references image {image_id} but only {rows} image rows exist")]
    MissingImage { image_id: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatcherMode {
    /// One language input per token.
    TokenLevel,
    /// One language input per sentence (the first-token output).
    SentenceLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherModel {
    /// Token (language) side head.
    pub w_mlp: MlpParams,
    /// Image side head.
    pub x_mlp: MlpParams,
    pub margin: f64,
    pub mode: MatcherMode,
}

/// One token scored against a positive and a negative image.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub token: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

/// All tokens of one caption sharing the caption's positive image and one
/// sampled negative.
#[derive(Debug, Clone)]
pub struct CaptionTriplets<'a> {
    pub tokens: Vec<&'a [f64]>,
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

/// Gradient of a loss with respect to both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherGrads {
    pub w_mlp: MlpParams,
    pub x_mlp: MlpParams,
}

/// `max(0, margin - pos + neg)`.
pub fn hinge(margin: f64, pos: f64, neg: f64) -> f64 {
    (margin - pos + neg).max(0.0)
}

impl MatcherModel {
    /// Freshly initialized heads with the standard hidden and output widths.
    pub fn new(
        token_dim: usize,
        image_dim: usize,
        margin: f64,
        mode: MatcherMode,
        seed: u64,
    ) -> Result<Self, MatcherError> {
        Self::with_widths(
            token_dim, image_dim, HIDDEN_DIM, OUTPUT_DIM, margin, mode, seed,
        )
    }

    pub fn with_widths(
        token_dim: usize,
        image_dim: usize,
        hidden: usize,
        output: usize,
        margin: f64,
        mode: MatcherMode,
        seed: u64,
    ) -> Result<Self, MatcherError> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(MatcherError::BadMargin(margin));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_mlp = MlpParams::init(token_dim, hidden, output, &mut rng);
        let x_mlp = MlpParams::init(image_dim, hidden, output, &mut rng);
        Ok(Self {
            w_mlp,
            x_mlp,
            margin,
            mode,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.w_mlp.input
    }

    pub fn image_dim(&self) -> usize {
        self.x_mlp.input
    }

    pub fn output_dim(&self) -> usize {
        self.w_mlp.output
    }

    pub fn project_token(&self, h: &[f64]) -> Result<Vec<f64>, MatcherError> {
        project(&self.w_mlp, h, "token")
    }

    pub fn project_image(&self, e: &[f64]) -> Result<Vec<f64>, MatcherError> {
        project(&self.x_mlp, e, "image")
    }

    pub fn relevance(&self, h: &[f64], e: &[f64]) -> Result<f64, MatcherError> {
        Ok(dot(&self.project_token(h)?, &self.project_image(e)?))
    }

    /// Sentence-image relevance for a sentence-level model, where the language
    /// input is the sentence's first-token output.
    pub fn sentence_relevance(&self, cls: &[f64], e: &[f64]) -> Result<f64, MatcherError> {
        self.require_mode(MatcherMode::SentenceLevel)?;
        self.relevance(cls, e)
    }

    pub fn require_mode(&self, required: MatcherMode) -> Result<(), MatcherError> {
        if self.mode != required {
            return Err(MatcherError::ModeMismatch {
                required,
                actual: self.mode,
            });
        }
        Ok(())
    }

    /// Summed hinge loss over independent (token, positive, negative) triplets.
    pub fn hinge_loss(&self, triplets: &[Triplet<'_>]) -> Result<f64, MatcherError> {
        if triplets.is_empty() {
            return Err(MatcherError::EmptyBatch);
        }
        let mut total = 0.0;
        for t in triplets {
            check_negative(t.positive, t.negative)?;
            let f = self.project_token(t.token)?;
            let pos = dot(&f, &self.project_image(t.positive)?);
            let neg = dot(&f, &self.project_image(t.negative)?);
            total += hinge(self.margin, pos, neg);
        }
        Ok(total)
    }

    /// Summed hinge loss over triplets and its gradient with respect to every
    /// head parameter.
    pub fn hinge_loss_and_grad(
        &self,
        triplets: &[Triplet<'_>],
    ) -> Result<(f64, MatcherGrads), MatcherError> {
        let groups: Vec<CaptionTriplets<'_>> = triplets
            .iter()
            .map(|t| CaptionTriplets {
                tokens: vec![t.token],
                positive: t.positive,
                negative: t.negative,
            })
            .collect();
        self.caption_loss_and_grad(&groups)
    }

    /// Summed hinge loss over captions, each caption contributing one term per
    /// token, and its gradient.
    pub fn caption_loss_and_grad(
        &self,
        captions: &[CaptionTriplets<'_>],
    ) -> Result<(f64, MatcherGrads), MatcherError> {
        if captions.is_empty() || captions.iter().all(|c| c.tokens.is_empty()) {
            return Err(MatcherError::EmptyBatch);
        }
        let mut grads = MatcherGrads {
            w_mlp: self.w_mlp.zeros_like(),
            x_mlp: self.x_mlp.zeros_like(),
        };
        let mut total = 0.0;
        for caption in captions {
            check_negative(caption.positive, caption.negative)?;
            check_dim("image", self.x_mlp.input, caption.positive.len())?;
            check_dim("image", self.x_mlp.input, caption.negative.len())?;
            let pos_act = self.x_mlp.forward(caption.positive);
            let neg_act = self.x_mlp.forward(caption.negative);
            if pos_act.norm == 0.0 || neg_act.norm == 0.0 {
                return Err(MatcherError::DegenerateProjection("image"));
            }
            let mut d_pos = vec![0.0; self.x_mlp.output];
            let mut d_neg = vec![0.0; self.x_mlp.output];
            for &h in &caption.tokens {
                check_dim("token", self.w_mlp.input, h.len())?;
                let act = self.w_mlp.forward(h);
                if act.norm == 0.0 {
                    return Err(MatcherError::DegenerateProjection("token"));
                }
                let pos = dot(&act.unit, &pos_act.unit);
                let neg = dot(&act.unit, &neg_act.unit);
                let loss = self.margin - pos + neg;
                // The kink itself (loss exactly 0) takes the zero subgradient.
                if loss > 0.0 {
                    total += loss;
                    let d_f: Vec<f64> = neg_act
                        .unit
                        .iter()
                        .zip(&pos_act.unit)
                        .map(|(n, p)| n - p)
                        .collect();
                    self.w_mlp.backward(h, &act, &d_f, &mut grads.w_mlp);
                    for k in 0..d_pos.len() {
                        d_pos[k] -= act.unit[k];
                        d_neg[k] += act.unit[k];
                    }
                }
            }
            self.x_mlp
                .backward(caption.positive, &pos_act, &d_pos, &mut grads.x_mlp);
            self.x_mlp
                .backward(caption.negative, &neg_act, &d_neg, &mut grads.x_mlp);
        }
        Ok((total, grads))
    }
}

fn check_dim(side: &'static str, expected: usize, got: usize) -> Result<(), MatcherError> {
    if expected != got {
        return Err(MatcherError::Dimension {
            side,
            expected,
            got,
        });
    }
    Ok(())
}

fn check_negative(positive: &[f64], negative: &[f64]) -> Result<(), MatcherError> {
    if positive == negative {
        return Err(MatcherError::NegativeEqualsPositive);
    }
    Ok(())
}

fn project(mlp: &MlpParams, x: &[f64], side: &'static str) -> Result<Vec<f64>, MatcherError> {
    check_dim(side, mlp.input, x.len())?;
    let act = mlp.forward(x);
    if act.norm == 0.0 || !act.norm.is_finite() {
        return Err(MatcherError::DegenerateProjection(side));
    }
    Ok(act.unit)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
