//! Exact maximum-inner-product search over a unit-norm voken vocabulary.
//!
//! For unit vectors `||f - y||^2 = 2 - 2 f.y`, so the row with the largest
//! inner product is also the Euclidean nearest neighbour. Search is a blocked
//! exhaustive scan; ties resolve to the lowest voken id, which keeps results
//! independent of blocking and thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::features::{FeatureError, FeatureMatrix, FeatureRole};
use crate::matcher::{dot, MatcherError, MatcherModel};

/// Tolerance on vocabulary row norms and query norms.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// Queries handled per block.
pub const QUERY_BLOCK: usize = 4096;
/// Vocabulary rows scanned per block.
const ROW_BLOCK: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("vocabulary row {row} has norm {norm}, expected 1")]
    NonUnitRow { row: usize, norm: f64 },
    #[error("query has norm {norm}, expected 1")]
    NonUnitQuery { norm: f64 },
    #[error("query dimension {got} does not match vocabulary dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("vocabulary is empty")]
    Empty,
    #[error("vocabulary has {rows} rows but {ids} image ids")]
    IdCount { rows: usize, ids: usize },
    #[error("sentence {sentence_id}: {tokens} tokens but {rows} feature rows")]
    FeatureCount {
        sentence_id: u64,
        tokens: usize,
        rows: usize,
    },
    #[error("sentence {sentence_id}: {source}")]
    Projection {
        sentence_id: u64,
        #[source]
        source: MatcherError,
    },
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// The image set that vokens are drawn from, as projected unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VokenVocabulary {
    pub embeddings: FeatureMatrix,
    pub image_ids: Vec<String>,
}

impl VokenVocabulary {
    pub fn size(&self) -> usize {
        self.embeddings.rows()
    }

    /// Projects raw image features through the model's image head.
    pub fn from_features(
        model: &MatcherModel,
        image_feats: &FeatureMatrix,
        image_ids: Vec<String>,
    ) -> Result<Self, IndexError> {
        if image_ids.len() != image_feats.rows() {
            return Err(IndexError::IdCount {
                rows: image_feats.rows(),
                ids: image_ids.len(),
            });
        }
        let rows = (0..image_feats.rows())
            .into_par_iter()
            .map(|i| model.project_image(&image_feats.row_f64(i)))
            .collect::<Result<Vec<_>, _>>()?;
        let embeddings = if rows.is_empty() {
            FeatureMatrix::new(
                0,
                model.output_dim(),
                FeatureRole::ImageEmbedding,
                Vec::new(),
            )?
        } else {
            FeatureMatrix::from_rows_f64(&rows, FeatureRole::ImageEmbedding)?
        };
        Ok(Self {
            embeddings,
            image_ids,
        })
    }
}

/// Per-sentence voken ids, one per token, with the achieved scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VokenAssignment {
    pub sentence_id: u64,
    /// Voken per token; `-1` marks a token excluded from assignment.
    pub voken_ids: Vec<i32>,
    pub scores: Vec<f64>,
}

/// Immutable exact search structure.
#[derive(Debug, Clone)]
pub struct Index {
    dim: usize,
    rows: usize,
    values: Vec<f64>,
}

pub fn build_index(vocab: &VokenVocabulary) -> Result<Index, IndexError> {
    Index::from_matrix(&vocab.embeddings)
}

impl Index {
    pub fn from_matrix(m: &FeatureMatrix) -> Result<Self, IndexError> {
        if m.rows() == 0 {
            return Err(IndexError::Empty);
        }
        let values: Vec<f64> = m.values().iter().map(|&v| f64::from(v)).collect();
        let dim = m.dim();
        for (row, chunk) in values.chunks(dim).enumerate() {
            let norm = dot(chunk, chunk).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(IndexError::NonUnitRow { row, norm });
            }
        }
        Ok(Self {
            dim,
            rows: m.rows(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, f: &[f64]) -> Result<(), IndexError> {
        if f.len() != self.dim {
            return Err(IndexError::Dimension {
                expected: self.dim,
                got: f.len(),
            });
        }
        let norm = dot(f, f).sqrt();
        // NaN fails this test too.
        let unit = (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE;
        if !unit {
            return Err(IndexError::NonUnitQuery { norm });
        }
        Ok(())
    }

    /// Highest inner product over the vocabulary, lowest id on ties.
    pub fn query(&self, f: &[f64]) -> Result<(usize, f64), IndexError> {
        self.check_query(f)?;
        Ok(self.scan(f, 0, self.rows, (0, f64::NEG_INFINITY)))
    }

    fn scan(&self, f: &[f64], start: usize, end: usize, mut best: (usize, f64)) -> (usize, f64) {
        for (offset, row) in self.values[start * self.dim..end * self.dim]
            .chunks_exact(self.dim)
            .enumerate()
        {
            let score = dot(f, row);
            if score > best.1 {
                best = (start + offset, score);
            }
        }
        best
    }

    /// Answers many queries. Queries are processed in blocks of
    /// [`QUERY_BLOCK`], blocks in parallel; output order follows input order.
    pub fn query_batch(&self, queries: &[Vec<f64>]) -> Result<Vec<(usize, f64)>, IndexError> {
        for q in queries {
            self.check_query(q)?;
        }
        let results = queries
            .par_chunks(QUERY_BLOCK)
            .flat_map_iter(|block| {
                let mut best = vec![(0usize, f64::NEG_INFINITY); block.len()];
                let mut start = 0;
                while start < self.rows {
                    let end = (start + ROW_BLOCK).min(self.rows);
                    for (q, b) in block.iter().zip(best.iter_mut()) {
                        *b = self.scan(q, start, end, *b);
                    }
                    start = end;
                }
                best
            })
            .collect();
        Ok(results)
    }

    /// Euclidean nearest row, computed from explicit distances.
    pub fn nearest_by_distance(&self, f: &[f64]) -> Result<(usize, f64), IndexError> {
        self.check_query(f)?;
        let mut best = (0, f64::INFINITY);
        for (i, row) in self.values.chunks_exact(self.dim).enumerate() {
            let d: f64 = f.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best)
    }
}

/// Splits corpus-ordered token feature rows into one matrix per sentence.
pub fn split_by_sentence(
    corpus: &Corpus,
    token_feats: &FeatureMatrix,
) -> Result<Vec<FeatureMatrix>, IndexError> {
    let offsets = corpus.row_offsets();
    let mut out = Vec::with_capacity(corpus.sentences.len());
    for (s, w) in corpus.sentences.iter().zip(offsets.windows(2)) {
        if w[1] > token_feats.rows() {
            return Err(IndexError::FeatureCount {
                sentence_id: s.sentence_id,
                tokens: s.tokens.len(),
                rows: token_feats.rows().saturating_sub(w[0]),
            });
        }
        out.push(token_feats.slice_rows(w[0], w[1]));
    }
    let total = *offsets.last().unwrap_or(&0);
    if total != token_feats.rows() {
        let last = corpus.sentences.last().map_or(0, |s| s.sentence_id);
        return Err(IndexError::FeatureCount {
            sentence_id: last,
            tokens: total,
            rows: token_feats.rows(),
        });
    }
    Ok(out)
}

/// Assigns every token the vocabulary image of highest contextual relevance.
pub fn vokenize_corpus(
    corpus: &Corpus,
    token_feats: &[FeatureMatrix],
    model: &MatcherModel,
    index: &Index,
) -> Result<Vec<VokenAssignment>, IndexError> {
    if token_feats.len() != corpus.sentences.len() {
        let sentence_id = corpus
            .sentences
            .get(token_feats.len())
            .map_or(0, |s| s.sentence_id);
        return Err(IndexError::FeatureCount {
            sentence_id,
            tokens: corpus
                .sentences
                .get(token_feats.len())
                .map_or(0, |s| s.len()),
            rows: 0,
        });
    }
    corpus
        .sentences
        .par_iter()
        .zip(token_feats.par_iter())
        .map(|(sentence, feats)| {
            if feats.rows() != sentence.tokens.len() {
                return Err(IndexError::FeatureCount {
                    sentence_id: sentence.sentence_id,
                    tokens: sentence.tokens.len(),
                    rows: feats.rows(),
                });
            }
            let queries = (0..feats.rows())
                .map(|r| model.project_token(&feats.row_f64(r)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| IndexError::Projection {
                    sentence_id: sentence.sentence_id,
                    source,
                })?;
            let hits = queries
                .iter()
                .map(|q| index.query(q))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(VokenAssignment {
                sentence_id: sentence.sentence_id,
                voken_ids: hits.iter().map(|&(id, _)| id as i32).collect(),
                scores: hits.iter().map(|&(_, s)| s).collect(),
            })
        })
        .collect()
}
