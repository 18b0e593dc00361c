//! Corpus diagnostics: sizes, n-gram divergence and grounding ratio.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::tokenizer::is_punctuation_token;

/// Occurrence threshold above which a caption token type counts as grounded.
pub const DEFAULT_GROUNDING_THRESHOLD: u64 = 100;
/// Types need more than this many occurrences to enter the vocabulary size.
pub const VOCAB_MIN_OCCURRENCES: u64 = 5;

static ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("corpus `{0}` is empty")]
    EmptyCorpus(String),
    #[error("n must be 1 or 2, got {0}")]
    BadOrder(usize),
    #[error("n-gram orders differ: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("no content tokens to measure grounding ratio against")]
    NoContentTokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    /// The bundled 179-word English list.
    pub fn english() -> Self {
        Self::from_lines(ENGLISH_STOPWORDS)
    }

    pub fn none() -> Self {
        Self(HashSet::new())
    }

    pub fn from_lines(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_lines(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn is_content(&self, token: &str) -> bool {
        !self.contains(token) && !is_punctuation_token(token)
    }
}

impl<S: Into<String>> FromIterator<S> for StopWords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramDistribution {
    pub n: usize,
    pub counts: BTreeMap<Vec<String>, u64>,
    pub total: u64,
}

fn merge_counts(
    mut a: BTreeMap<Vec<String>, u64>,
    b: BTreeMap<Vec<String>, u64>,
) -> BTreeMap<Vec<String>, u64> {
    for (k, v) in b {
        *a.entry(k).or_insert(0) += v;
    }
    a
}

/// Counts within-sentence n-grams of token texts. Bigrams never span two
/// sentences.
pub fn build_ngram_distribution(
    corpus: &Corpus,
    n: usize,
) -> Result<NGramDistribution, StatsError> {
    if !(1..=2).contains(&n) {
        return Err(StatsError::BadOrder(n));
    }
    if corpus.token_count() == 0 {
        return Err(StatsError::EmptyCorpus(corpus.name.clone()));
    }
    let counts = corpus
        .sentences
        .par_iter()
        .fold(BTreeMap::new, |mut acc, s| {
            for w in s.tokens.windows(n) {
                let gram = w.iter().map(|t| t.text.clone()).collect();
                *acc.entry(gram).or_insert(0u64) += 1;
            }
            acc
        })
        .reduce(BTreeMap::new, merge_counts);
    let total = counts.values().sum();
    Ok(NGramDistribution { n, counts, total })
}

fn xlog2_ratio(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / m).log2()
    }
}

/// Base-2 Jensen-Shannon divergence of two count distributions, in `[0, 1]`.
pub fn jsd(p: &NGramDistribution, q: &NGramDistribution) -> Result<f64, StatsError> {
    if p.n != q.n {
        return Err(StatsError::OrderMismatch(p.n, q.n));
    }
    if p.total == 0 || q.total == 0 {
        return Err(StatsError::EmptyCorpus(String::new()));
    }
    let tp = p.total as f64;
    let tq = q.total as f64;
    let mut pi = p.counts.iter().peekable();
    let mut qi = q.counts.iter().peekable();
    let mut sum = 0.0;
    // Walk the sorted union of both supports.
    loop {
        let (cp, cq) = match (pi.peek(), qi.peek()) {
            (None, None) => break,
            (Some(_), None) => (*pi.next().unwrap().1, 0),
            (None, Some(_)) => (0, *qi.next().unwrap().1),
            (Some((kp, _)), Some((kq, _))) => match kp.cmp(kq) {
                std::cmp::Ordering::Less => (*pi.next().unwrap().1, 0),
                std::cmp::Ordering::Greater => (0, *qi.next().unwrap().1),
                std::cmp::Ordering::Equal => (*pi.next().unwrap().1, *qi.next().unwrap().1),
            },
        };
        let a = cp as f64 / tp;
        let b = cq as f64 / tq;
        let m = (a + b) / 2.0;
        sum += 0.5 * xlog2_ratio(a, m) + 0.5 * xlog2_ratio(b, m);
    }
    Ok(sum.clamp(0.0, 1.0))
}

/// Caption token types considered visually grounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedTokenSet {
    pub token_types: BTreeSet<String>,
    pub source_corpus: String,
    pub occurrence_threshold: u64,
}

impl GroundedTokenSet {
    pub fn contains(&self, token: &str) -> bool {
        self.token_types.contains(token)
    }

    pub fn len(&self) -> usize {
        self.token_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_types.is_empty()
    }

    /// Reads one token type per line.
    pub fn from_lines(text: &str, source: &str) -> Self {
        Self {
            token_types: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            source_corpus: source.to_string(),
            occurrence_threshold: 0,
        }
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.token_types {
            out.push_str(t);
            out.push('\n');
        }
        out
    }
}

fn type_counts(corpus: &Corpus) -> BTreeMap<&str, u64> {
    let mut counts = BTreeMap::new();
    for s in &corpus.sentences {
        for t in &s.tokens {
            *counts.entry(t.text.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

/// Content token types occurring more than `threshold` times in `captions`.
pub fn build_grounded_set(
    captions: &Corpus,
    stopwords: &StopWords,
    threshold: u64,
) -> Result<GroundedTokenSet, StatsError> {
    if captions.token_count() == 0 {
        return Err(StatsError::EmptyCorpus(captions.name.clone()));
    }
    let token_types = type_counts(captions)
        .into_iter()
        .filter(|(t, c)| *c > threshold && stopwords.is_content(t))
        .map(|(t, _)| t.to_string())
        .collect();
    Ok(GroundedTokenSet {
        token_types,
        source_corpus: captions.name.clone(),
        occurrence_threshold: threshold,
    })
}

/// Share of content-token occurrences whose type is grounded.
pub fn grounding_ratio(
    corpus: &Corpus,
    grounded: &GroundedTokenSet,
    stopwords: &StopWords,
) -> Result<f64, StatsError> {
    if corpus.is_empty() {
        return Err(StatsError::EmptyCorpus(corpus.name.clone()));
    }
    let (hits, total) = corpus
        .sentences
        .par_iter()
        .map(|s| {
            s.tokens
                .iter()
                .filter(|t| stopwords.is_content(&t.text))
                .fold((0u64, 0u64), |(h, n), t| {
                    (h + u64::from(grounded.contains(&t.text)), n + 1)
                })
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(StatsError::NoContentTokens);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub token_count: u64,
    pub sentence_count: u64,
    pub vocab_size: u64,
    pub tokens_per_sentence: f64,
    pub jsd_1gram: f64,
    pub jsd_2gram: f64,
    pub grounding_ratio: f64,
}

impl CorpusReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Non-punctuation types with more than [`VOCAB_MIN_OCCURRENCES`] occurrences.
pub fn vocab_size(corpus: &Corpus) -> u64 {
    type_counts(corpus)
        .into_iter()
        .filter(|(t, c)| *c > VOCAB_MIN_OCCURRENCES && !is_punctuation_token(t))
        .count() as u64
}

pub fn report(
    corpus: &Corpus,
    reference: &Corpus,
    grounded: &GroundedTokenSet,
) -> Result<CorpusReport, StatsError> {
    report_with_stopwords(corpus, reference, grounded, &StopWords::english())
}

pub fn report_with_stopwords(
    corpus: &Corpus,
    reference: &Corpus,
    grounded: &GroundedTokenSet,
    stopwords: &StopWords,
) -> Result<CorpusReport, StatsError> {
    for c in [corpus, reference] {
        if c.token_count() == 0 {
            return Err(StatsError::EmptyCorpus(c.name.clone()));
        }
    }
    let token_count = corpus.token_count() as u64;
    let sentence_count = corpus.sentences.len() as u64;
    let jsd_1gram = jsd(
        &build_ngram_distribution(corpus, 1)?,
        &build_ngram_distribution(reference, 1)?,
    )?;
    // A corpus of one-token sentences has no bigrams.
    let bigrams = |c: &Corpus| build_ngram_distribution(c, 2).ok().filter(|d| d.total > 0);
    let jsd_2gram = match (bigrams(corpus), bigrams(reference)) {
        (Some(p), Some(q)) => jsd(&p, &q)?,
        (None, None) => 0.0,
        _ => 1.0,
    };
    Ok(CorpusReport {
        token_count,
        sentence_count,
        vocab_size: vocab_size(corpus),
        tokens_per_sentence: token_count as f64 / sentence_count as f64,
        jsd_1gram,
        jsd_2gram,
        grounding_ratio: grounding_ratio(corpus, grounded, stopwords)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerRegistry;
    use approx::assert_abs_diff_eq;

    fn corpus(text: &str) -> Corpus {
        Corpus::from_text("c", text, "whitespace", &TokenizerRegistry::with_defaults()).unwrap()
    }

    fn gram(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn dist(n: usize, entries: &[(&[&str], u64)]) -> NGramDistribution {
        let counts: BTreeMap<_, _> = entries.iter().map(|(k, v)| (gram(k), *v)).collect();
        let total = counts.values().sum();
        NGramDistribution { n, counts, total }
    }

    #[test]
    fn stopword_list_has_179_entries() {
        let s = StopWords::english();
        assert_eq!(s.len(), 179);
        assert!(s.contains("the") && s.contains("wouldn't"));
    }

    #[test]
    fn unigram_and_bigram_counts() {
        let c = corpus("a b a");
        let d1 = build_ngram_distribution(&c, 1).unwrap();
        assert_eq!(d1.counts[&gram(&["a"])], 2);
        assert_eq!(d1.counts[&gram(&["b"])], 1);
        assert_eq!(d1.total, 3);
        let d2 = build_ngram_distribution(&c, 2).unwrap();
        assert_eq!(d2, dist(2, &[(&["a", "b"], 1), (&["b", "a"], 1)]));
    }

    #[test]
    fn bigrams_do_not_cross_sentences() {
        let d2 = build_ngram_distribution(&corpus("a b\nb a"), 2).unwrap();
        assert_eq!(d2, dist(2, &[(&["a", "b"], 1), (&["b", "a"], 1)]));
    }

    #[test]
    fn ngram_errors() {
        assert_eq!(
            build_ngram_distribution(&corpus(""), 1),
            Err(StatsError::EmptyCorpus("c".into()))
        );
        assert_eq!(
            build_ngram_distribution(&corpus("a"), 3),
            Err(StatsError::BadOrder(3))
        );
        let p = dist(1, &[(&["a"], 1)]);
        let q = dist(2, &[(&["a", "b"], 1)]);
        assert_eq!(jsd(&p, &q), Err(StatsError::OrderMismatch(1, 2)));
    }

    #[test]
    fn jsd_hand_cases() {
        let p = dist(1, &[(&["x"], 1), (&["y"], 1)]);
        let q = dist(1, &[(&["x"], 1)]);
        // H(0.75, 0.25) - 0.5 H(0.5, 0.5) - 0.5 H(1, 0)
        let h = |ps: &[f64]| {
            -ps.iter()
                .filter(|&&v| v > 0.0)
                .map(|v| v * v.log2())
                .sum::<f64>()
        };
        let expected = h(&[0.75, 0.25]) - 0.5 * h(&[0.5, 0.5]) - 0.5 * h(&[1.0]);
        assert_abs_diff_eq!(expected, 0.3113, epsilon = 1e-4);
        assert_abs_diff_eq!(jsd(&p, &q).unwrap(), expected, epsilon = 1e-12);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let r = dist(1, &[(&["z"], 4)]);
        assert_eq!(jsd(&q, &r).unwrap(), 1.0);
    }

    #[test]
    fn grounded_set_threshold() {
        let mut text = String::new();
        for _ in 0..150 {
            text.push_str("the cat\n");
        }
        for _ in 0..50 {
            text.push_str("run\n");
        }
        let set = build_grounded_set(&corpus(&text), &StopWords::english(), 100).unwrap();
        assert_eq!(set.token_types.iter().collect::<Vec<_>>(), ["cat"]);
        let set = build_grounded_set(&corpus("dog"), &StopWords::english(), 0).unwrap();
        assert!(set.contains("dog"));
    }

    #[test]
    fn grounded_set_skips_punctuation() {
        let set = build_grounded_set(&corpus(". . dog"), &StopWords::none(), 0).unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn grounding_ratio_hand_count() {
        let c = corpus("cat cat runs");
        let g = GroundedTokenSet::from_lines("cat", "x");
        assert_abs_diff_eq!(
            grounding_ratio(&c, &g, &StopWords::none()).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        let empty = GroundedTokenSet::from_lines("", "x");
        assert_eq!(
            grounding_ratio(&c, &empty, &StopWords::none()).unwrap(),
            0.0
        );
        let only_stop = corpus("the a");
        assert_eq!(
            grounding_ratio(&only_stop, &g, &StopWords::english()),
            Err(StatsError::NoContentTokens)
        );
    }

    #[test]
    fn report_fields() {
        let c = corpus("a big red cat");
        let g = GroundedTokenSet::from_lines("cat", "x");
        let r = report(&c, &c, &g).unwrap();
        assert_eq!(r.tokens_per_sentence, 4.0);
        assert_eq!(r.jsd_1gram, 0.0);
        assert_eq!(r.jsd_2gram, 0.0);
        assert_abs_diff_eq!(r.grounding_ratio, 1.0 / 3.0, epsilon = 1e-15);
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        for key in [
            "token_count",
            "sentence_count",
            "vocab_size",
            "tokens_per_sentence",
            "jsd_1gram",
            "jsd_2gram",
            "grounding_ratio",
        ] {
            assert!(line.contains(&format!("\"{key}\"")), "{line}");
        }
    }

    #[test]
    fn vocab_counts_types_above_five() {
        let c = corpus(&"a b\n".repeat(6));
        assert_eq!(vocab_size(&c), 2);
        let c = corpus(&"a\n".repeat(5));
        assert_eq!(vocab_size(&c), 0);
    }
}
