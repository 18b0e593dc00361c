//! Alternative voken label strategies used for comparison.
//!
//! * term-frequency retrieval: each image's captions form one document, and a
//!   token is mapped to an image drawn from a Boltzmann distribution over its
//!   per-image term frequency;
//! * sentence-level retrieval: one image per sentence from a sentence-level
//!   matcher, optionally propagated to every token;
//! * ablations: random ids, per-batch shuffles of existing vokens, and the
//!   token type ids themselves.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CaptionPair, Corpus};
use crate::features::FeatureMatrix;
use crate::index::{Index, IndexError, VokenAssignment};
use crate::matcher::{MatcherError, MatcherMode, MatcherModel};
use crate::revokenize::SENTINEL_VOKEN;
use crate::seed::item_rng;

/// Default Boltzmann temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;
/// Sentences per shuffle batch.
pub const SHUFFLE_BATCH: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("image {0} has no caption tokens")]
    ImageWithoutCaptions(usize),
    #[error("caption pair references sentence {0}, which is not in the caption corpus")]
    MissingSentence(u64),
    #[error("caption pair references image {image_id}, manifest has {images}")]
    MissingImage { image_id: usize, images: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("shuffle ablation needs existing voken assignments")]
    ShuffleWithoutAssignments,
    #[error("{assignments} assignments for {sentences} sentences")]
    AssignmentCount {
        assignments: usize,
        sentences: usize,
    },
    #[error("voken vocabulary size must be positive")]
    EmptyVocabulary,
    #[error("{features} sentence feature rows for {sentences} sentences")]
    FeatureCount { features: usize, sentences: usize },
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Per-image term frequencies of caption tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTF {
    /// token -> sparse (image, tf) entries, images ascending.
    pub tf: HashMap<String, Vec<(usize, f64)>>,
    pub images: usize,
    pub gamma: f64,
}

pub fn build_tf(
    pairs: &[CaptionPair],
    captions: &Corpus,
    images: usize,
) -> Result<ConditionalTF, BaselineError> {
    let mut counts: Vec<HashMap<&str, u64>> = vec![HashMap::new(); images];
    for pair in pairs {
        let sentence = captions
            .sentence(pair.sentence_id)
            .ok_or(BaselineError::MissingSentence(pair.sentence_id))?;
        let doc = counts
            .get_mut(pair.image_id)
            .ok_or(BaselineError::MissingImage {
                image_id: pair.image_id,
                images,
            })?;
        for t in &sentence.tokens {
            *doc.entry(t.text.as_str()).or_insert(0) += 1;
        }
    }
    let mut tf: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
    for (image, doc) in counts.iter().enumerate() {
        let total: u64 = doc.values().sum();
        if total == 0 {
            return Err(BaselineError::ImageWithoutCaptions(image));
        }
        for (&tok, &c) in doc {
            tf.entry(tok.to_string())
                .or_default()
                .push((image, c as f64 / total as f64));
        }
    }
    Ok(ConditionalTF {
        tf,
        images,
        gamma: DEFAULT_TEMPERATURE,
    })
}

impl ConditionalTF {
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self, BaselineError> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(BaselineError::BadTemperature(gamma));
        }
        self.gamma = gamma;
        Ok(self)
    }

    /// tf of `tok` in the captions of `image`; 0 when absent.
    pub fn get(&self, tok: &str, image: usize) -> f64 {
        self.tf
            .get(tok)
            .and_then(|e| e.iter().find(|(i, _)| *i == image))
            .map_or(0.0, |&(_, v)| v)
    }

    /// Dense tf row of `tok` over all images, if the token occurs in any caption.
    pub fn row(&self, tok: &str) -> Option<Vec<f64>> {
        self.tf.get(tok).map(|entries| {
            let mut row = vec![0.0; self.images];
            for &(i, v) in entries {
                row[i] = v;
            }
            row
        })
    }

    /// `p(image | tok)`; uniform for tokens absent from every caption.
    pub fn distribution(&self, tok: &str) -> Vec<f64> {
        match self.row(tok) {
            Some(row) => boltzmann(&row, self.gamma),
            None => vec![1.0 / self.images as f64; self.images],
        }
    }
}

/// Softmax of `values / gamma`, computed with the maximum subtracted.
pub fn boltzmann(values: &[f64], gamma: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / gamma).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn tf_distribution(tfm: &ConditionalTF, tok: &str) -> Vec<f64> {
    tfm.distribution(tok)
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// One draw for `tok` under seed `seed`.
pub fn tf_sample(tfm: &ConditionalTF, tok: &str, seed: u64) -> usize {
    TfSampler::new(tfm, seed).sample(tok)
}

/// Repeated draws sharing one seeded stream.
pub struct TfSampler<'a> {
    tfm: &'a ConditionalTF,
    rng: ChaCha8Rng,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> TfSampler<'a> {
    pub fn new(tfm: &'a ConditionalTF, seed: u64) -> Self {
        Self::with_rng(tfm, ChaCha8Rng::seed_from_u64(seed))
    }

    fn with_rng(tfm: &'a ConditionalTF, rng: ChaCha8Rng) -> Self {
        Self {
            tfm,
            rng,
            cache: HashMap::new(),
        }
    }

    pub fn sample(&mut self, tok: &str) -> usize {
        if !self.cache.contains_key(tok) {
            self.cache
                .insert(tok.to_string(), self.tfm.distribution(tok));
        }
        sample_index(&self.cache[tok], &mut self.rng)
    }
}

/// Term-frequency labels for every token; sentence `k` draws from a stream
/// derived from `(seed, k)`.
pub fn tf_labels(corpus: &Corpus, tfm: &ConditionalTF, seed: u64) -> Vec<VokenAssignment> {
    corpus
        .sentences
        .par_iter()
        .map(|s| {
            let mut sampler = TfSampler::with_rng(tfm, item_rng(seed, s.sentence_id));
            let voken_ids: Vec<i32> = s
                .tokens
                .iter()
                .map(|t| sampler.sample(&t.text) as i32)
                .collect();
            let scores = s
                .tokens
                .iter()
                .zip(&voken_ids)
                .map(|(t, &v)| tfm.get(&t.text, v as usize))
                .collect();
            VokenAssignment {
                sentence_id: s.sentence_id,
                voken_ids,
                scores,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceLabel {
    pub sentence_id: u64,
    pub voken_id: i32,
    pub score: f64,
}

/// One voken per sentence: the image of highest sentence-level relevance.
/// `cls_feats` holds one first-token row per sentence.
pub fn sentence_label(
    corpus: &Corpus,
    cls_feats: &FeatureMatrix,
    model: &MatcherModel,
    index: &Index,
) -> Result<Vec<SentenceLabel>, BaselineError> {
    model.require_mode(MatcherMode::SentenceLevel)?;
    if cls_feats.rows() != corpus.sentences.len() {
        return Err(BaselineError::FeatureCount {
            features: cls_feats.rows(),
            sentences: corpus.sentences.len(),
        });
    }
    corpus
        .sentences
        .par_iter()
        .enumerate()
        .map(|(row, s)| {
            let f = model.project_token(&cls_feats.row_f64(row))?;
            let (id, score) = index.query(&f)?;
            Ok(SentenceLabel {
                sentence_id: s.sentence_id,
                voken_id: id as i32,
                score,
            })
        })
        .collect()
}

/// Copies each sentence label onto every token of its sentence.
pub fn propagate(
    corpus: &Corpus,
    labels: &[SentenceLabel],
) -> Result<Vec<VokenAssignment>, BaselineError> {
    if labels.len() != corpus.sentences.len() {
        return Err(BaselineError::AssignmentCount {
            assignments: labels.len(),
            sentences: corpus.sentences.len(),
        });
    }
    Ok(corpus
        .sentences
        .iter()
        .zip(labels)
        .map(|(s, l)| VokenAssignment {
            sentence_id: s.sentence_id,
            voken_ids: vec![l.voken_id; s.tokens.len()],
            scores: vec![l.score; s.tokens.len()],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationKind {
    /// Uniform random ids.
    Random,
    /// Existing vokens permuted within each batch of sentences.
    Shuffle,
    /// Token type ids used as labels.
    Tokens,
}

pub fn ablation_labels(
    kind: AblationKind,
    corpus: &Corpus,
    vocab_size: usize,
    assignments: Option<&[VokenAssignment]>,
    seed: u64,
) -> Result<Vec<VokenAssignment>, BaselineError> {
    match kind {
        AblationKind::Random => {
            if vocab_size == 0 {
                return Err(BaselineError::EmptyVocabulary);
            }
            Ok(corpus
                .sentences
                .par_iter()
                .map(|s| {
                    let mut rng = item_rng(seed, s.sentence_id);
                    VokenAssignment {
                        sentence_id: s.sentence_id,
                        voken_ids: (0..s.tokens.len())
                            .map(|_| rng.gen_range(0..vocab_size) as i32)
                            .collect(),
                        scores: vec![f64::NAN; s.tokens.len()],
                    }
                })
                .collect())
        }
        AblationKind::Tokens => Ok(corpus
            .sentences
            .iter()
            .map(|s| VokenAssignment {
                sentence_id: s.sentence_id,
                voken_ids: s.tokens.iter().map(|t| t.type_id as i32).collect(),
                scores: vec![f64::NAN; s.tokens.len()],
            })
            .collect()),
        AblationKind::Shuffle => {
            let assignments = assignments.ok_or(BaselineError::ShuffleWithoutAssignments)?;
            if assignments.len() != corpus.sentences.len() {
                return Err(BaselineError::AssignmentCount {
                    assignments: assignments.len(),
                    sentences: corpus.sentences.len(),
                });
            }
            Ok(assignments
                .par_chunks(SHUFFLE_BATCH)
                .enumerate()
                .flat_map_iter(|(batch, chunk)| shuffle_batch(chunk, item_rng(seed, batch as u64)))
                .collect())
        }
    }
}

/// Permutes the non-sentinel vokens of a batch; sentinel positions stay put.
fn shuffle_batch(chunk: &[VokenAssignment], mut rng: ChaCha8Rng) -> Vec<VokenAssignment> {
    let mut pool: Vec<i32> = chunk
        .iter()
        .flat_map(|a| a.voken_ids.iter().copied())
        .filter(|&v| v != SENTINEL_VOKEN)
        .collect();
    pool.shuffle(&mut rng);
    let mut next = pool.into_iter();
    chunk
        .iter()
        .map(|a| VokenAssignment {
            sentence_id: a.sentence_id,
            voken_ids: a
                .voken_ids
                .iter()
                .map(|&v| {
                    if v == SENTINEL_VOKEN {
                        v
                    } else {
                        next.next().expect("pool sized to batch")
                    }
                })
                .collect(),
            scores: vec![f64::NAN; a.voken_ids.len()],
        })
        .collect()
}
