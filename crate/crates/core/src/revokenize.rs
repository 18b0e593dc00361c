//! Transfer of vokens between tokenizations of the same sentence.
//!
//! Each target token takes the voken of the source token whose character
//! range has the highest intersection-over-union with its own. Spans are
//! positional, so subword markers such as `##` never affect the overlap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Token, TokenizedSentence};
use crate::index::VokenAssignment;

/// Voken id written for target tokens excluded from assignment.
pub const SENTINEL_VOKEN: i32 = -1;

/// Target tokens that stand for no raw text and receive [`SENTINEL_VOKEN`].
pub const SPECIAL_TOKENS: &[&str] = &[
    "[CLS]", "[SEP]", "[PAD]", "[MASK]", "<s>", "</s>", "<pad>", "<mask>",
];

#[derive(Debug, Error, PartialEq)]
pub enum RevokenizeError {
    #[error("sentence {sentence_id}: raw text differs between tokenizations")]
    RawMismatch { sentence_id: u64 },
    #[error("sentence {sentence_id}: source tokenization has no tokens")]
    EmptySource { sentence_id: u64 },
    #[error("sentence {sentence_id}: {vokens} vokens for {tokens} source tokens")]
    Length {
        sentence_id: u64,
        vokens: usize,
        tokens: usize,
    },
    #[error("corpora have {source_len} and {target} sentences")]
    SentenceCount { source_len: usize, target: usize },
}

/// For each target token, the index of its best-overlapping source token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub ind: Vec<usize>,
    pub iou: Vec<f64>,
    /// Target positions that carry the sentinel instead of a transferred voken.
    pub special: Vec<bool>,
}

impl AlignmentMap {
    /// Target tokens that overlap no source token at all.
    pub fn zero_overlap(&self) -> usize {
        self.iou
            .iter()
            .zip(&self.special)
            .filter(|(&iou, &special)| iou == 0.0 && !special)
            .count()
    }
}

/// Jaccard index of two character ranges.
pub fn span_iou(a: &Token, b: &Token) -> f64 {
    let inter = a
        .span_end
        .min(b.span_end)
        .saturating_sub(a.span_start.max(b.span_start));
    let union = a.span_len() + b.span_len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

pub fn align(
    t1: &TokenizedSentence,
    t2: &TokenizedSentence,
) -> Result<AlignmentMap, RevokenizeError> {
    if t1.raw != t2.raw {
        return Err(RevokenizeError::RawMismatch {
            sentence_id: t2.sentence_id,
        });
    }
    if t1.tokens.is_empty() && !t2.tokens.is_empty() {
        return Err(RevokenizeError::EmptySource {
            sentence_id: t1.sentence_id,
        });
    }
    let mut map = AlignmentMap {
        ind: Vec::with_capacity(t2.tokens.len()),
        iou: Vec::with_capacity(t2.tokens.len()),
        special: Vec::with_capacity(t2.tokens.len()),
    };
    for u in &t2.tokens {
        let mut best = (0usize, 0.0f64);
        for (i, w) in t1.tokens.iter().enumerate() {
            let iou = span_iou(w, u);
            // Strict comparison keeps the leftmost source token on ties.
            if iou > best.1 {
                best = (i, iou);
            }
        }
        map.ind.push(best.0);
        map.iou.push(best.1);
        map.special.push(SPECIAL_TOKENS.contains(&u.text.as_str()));
    }
    Ok(map)
}

/// Rewrites source-token vokens onto the target tokenization.
pub fn revokenize(
    assignment: &VokenAssignment,
    map: &AlignmentMap,
    source_tokens: usize,
) -> Result<VokenAssignment, RevokenizeError> {
    if assignment.voken_ids.len() != source_tokens {
        return Err(RevokenizeError::Length {
            sentence_id: assignment.sentence_id,
            vokens: assignment.voken_ids.len(),
            tokens: source_tokens,
        });
    }
    let mut voken_ids = Vec::with_capacity(map.ind.len());
    let mut scores = Vec::with_capacity(map.ind.len());
    for (&i, &special) in map.ind.iter().zip(&map.special) {
        if special {
            voken_ids.push(SENTINEL_VOKEN);
            scores.push(f64::NAN);
        } else {
            voken_ids.push(assignment.voken_ids[i]);
            scores.push(assignment.scores.get(i).copied().unwrap_or(f64::NAN));
        }
    }
    Ok(VokenAssignment {
        sentence_id: assignment.sentence_id,
        voken_ids,
        scores,
    })
}

/// Summary of a corpus-level transfer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RevokenizeSummary {
    pub sentences: usize,
    pub target_tokens: usize,
    pub zero_overlap_tokens: usize,
    pub special_tokens: usize,
}

/// Transfers the assignments of `source` onto `target`, sentence by sentence.
pub fn revokenize_corpus(
    source: &Corpus,
    target: &Corpus,
    assignments: &[VokenAssignment],
) -> Result<(Vec<VokenAssignment>, RevokenizeSummary), RevokenizeError> {
    if source.sentences.len() != target.sentences.len()
        || assignments.len() != source.sentences.len()
    {
        return Err(RevokenizeError::SentenceCount {
            source_len: source.sentences.len().min(assignments.len()),
            target: target.sentences.len(),
        });
    }
    let mut summary = RevokenizeSummary::default();
    let mut out = Vec::with_capacity(assignments.len());
    for ((s1, s2), a) in source
        .sentences
        .iter()
        .zip(&target.sentences)
        .zip(assignments)
    {
        let map = align(s1, s2)?;
        summary.sentences += 1;
        summary.target_tokens += s2.tokens.len();
        summary.zero_overlap_tokens += map.zero_overlap();
        summary.special_tokens += map.special.iter().filter(|&&s| s).count();
        let mut transferred = revokenize(a, &map, s1.tokens.len())?;
        transferred.sentence_id = s2.sentence_id;
        out.push(transferred);
    }
    Ok((out, summary))
}
