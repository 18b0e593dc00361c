//! Tokenized corpora with character-span provenance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::tokenizer::{Piece, Tokenizer, TokenizerError, TokenizerRegistry};

/// Longest token sequence kept as one sentence.
pub const MAX_SENTENCE_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("sentence {0} not found in corpus")]
    MissingSentence(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Inclusive character offset into the raw sentence.
    pub span_start: usize,
    /// Exclusive character offset.
    pub span_end: usize,
    pub type_id: u32,
}

impl Token {
    pub fn span_len(&self) -> usize {
        self.span_end - self.span_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSentence {
    pub sentence_id: u64,
    pub raw: String,
    pub tokens: Vec<Token>,
    pub tokenizer_id: String,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rebuilds the raw sentence from token spans and the gaps between them.
    pub fn reconstruct(&self) -> String {
        let chars: Vec<char> = self.raw.chars().collect();
        let mut out = String::with_capacity(self.raw.len());
        let mut cursor = 0;
        for token in &self.tokens {
            out.extend(&chars[cursor..token.span_start]);
            out.extend(&chars[token.span_start..token.span_end]);
            cursor = token.span_end;
        }
        out.extend(&chars[cursor..]);
        out
    }

    /// Checks span bounds, ordering and non-overlap.
    pub fn spans_valid(&self) -> bool {
        let n = self.raw.chars().count();
        let mut prev_end = 0;
        self.tokens.iter().all(|t| {
            let ok = t.span_start < t.span_end && t.span_end <= n && t.span_start >= prev_end;
            prev_end = t.span_end;
            ok
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub tokenizer_id: String,
    pub sentences: Vec<TokenizedSentence>,
    /// Number of distinct type ids: the tokenizer's vocabulary size, or the
    /// number of interned types for open-vocabulary tokenizers.
    pub type_count: usize,
}

impl Corpus {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence(&self, id: u64) -> Option<&TokenizedSentence> {
        // Ids are dense from 0.
        self.sentences.get(usize::try_from(id).ok()?)
    }

    /// First feature row of every sentence when token rows are laid out in
    /// corpus order, followed by the total row count.
    pub fn row_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for s in &self.sentences {
            acc += s.tokens.len();
            offsets.push(acc);
        }
        offsets
    }

    /// Tokenizes in-memory text in the corpus text format.
    pub fn from_text(
        name: &str,
        text: &str,
        tokenizer_id: &str,
        registry: &TokenizerRegistry,
    ) -> Result<Self, CorpusError> {
        read_corpus(name, text.as_bytes(), tokenizer_id, registry)
    }
}

/// Pairs a caption sentence with an image row of a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionPair {
    pub sentence_id: u64,
    pub image_id: usize,
}

pub fn load_corpus(
    path: &Path,
    tokenizer_id: &str,
    registry: &TokenizerRegistry,
) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_corpus(&name, BufReader::new(file), tokenizer_id, registry).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Reads the corpus text format: UTF-8, one sentence per line, blank lines
/// separate documents and are skipped.
pub fn read_corpus<R: BufRead>(
    name: &str,
    reader: R,
    tokenizer_id: &str,
    registry: &TokenizerRegistry,
) -> Result<Corpus, CorpusError> {
    let tokenizer = registry.get(tokenizer_id)?;
    let mut interner = TypeInterner::default();
    let mut sentences = Vec::new();
    for line in SentenceLines::new(reader) {
        let raw = match line? {
            RawLine::Text(raw) => raw,
            RawLine::Blank => continue,
        };
        for (raw, pieces) in split_long(&raw, tokenizer.tokenize(&raw)) {
            let tokens = pieces
                .into_iter()
                .map(|p| Token {
                    type_id: p.id.unwrap_or_else(|| interner.intern(&p.text)),
                    text: p.text,
                    span_start: p.start,
                    span_end: p.end,
                })
                .collect();
            sentences.push(TokenizedSentence {
                sentence_id: sentences.len() as u64,
                raw,
                tokens,
                tokenizer_id: tokenizer_id.to_string(),
            });
        }
    }
    Ok(Corpus {
        name: name.to_string(),
        tokenizer_id: tokenizer_id.to_string(),
        sentences,
        type_count: tokenizer.vocab_size().unwrap_or(interner.len()),
    })
}

/// Tokenizes a single sentence without the corpus-level length split. Type ids
/// of open-vocabulary tokenizers are left at 0.
pub fn tokenize_sentence(
    sentence_id: u64,
    raw: &str,
    tokenizer_id: &str,
    tokenizer: &dyn Tokenizer,
) -> TokenizedSentence {
    TokenizedSentence {
        sentence_id,
        raw: raw.to_string(),
        tokens: tokenizer
            .tokenize(raw)
            .into_iter()
            .map(|p| Token {
                type_id: p.id.unwrap_or(0),
                text: p.text,
                span_start: p.start,
                span_end: p.end,
            })
            .collect(),
        tokenizer_id: tokenizer_id.to_string(),
    }
}

/// Re-tokenizes every sentence of `corpus` with another tokenizer, keeping
/// sentence ids and raw text. Used to pair two tokenizations of one corpus.
pub fn retokenize(
    corpus: &Corpus,
    tokenizer_id: &str,
    registry: &TokenizerRegistry,
) -> Result<Corpus, CorpusError> {
    let tokenizer = registry.get(tokenizer_id)?;
    let mut interner = TypeInterner::default();
    let sentences = corpus
        .sentences
        .iter()
        .map(|s| TokenizedSentence {
            sentence_id: s.sentence_id,
            raw: s.raw.clone(),
            tokens: tokenizer
                .tokenize(&s.raw)
                .into_iter()
                .map(|p| Token {
                    type_id: p.id.unwrap_or_else(|| interner.intern(&p.text)),
                    text: p.text,
                    span_start: p.start,
                    span_end: p.end,
                })
                .collect(),
            tokenizer_id: tokenizer_id.to_string(),
        })
        .collect();
    Ok(Corpus {
        name: corpus.name.clone(),
        tokenizer_id: tokenizer_id.to_string(),
        sentences,
        type_count: tokenizer.vocab_size().unwrap_or(interner.len()),
    })
}

#[derive(Debug, Default)]
struct TypeInterner {
    ids: HashMap<String, u32>,
}

impl TypeInterner {
    fn intern(&mut self, text: &str) -> u32 {
        if let Some(&id) = self.ids.get(text) {
            return id;
        }
        let id = self.ids.len() as u32;
        self.ids.insert(text.to_string(), id);
        id
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// One line of the corpus text format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawLine {
    /// NFC-normalized sentence text.
    Text(String),
    Blank,
}

/// Streams lines of a corpus file, validating UTF-8 and rejecting NUL bytes.
pub struct SentenceLines<R> {
    reader: R,
    line: usize,
    buf: Vec<u8>,
}

impl<R: BufRead> SentenceLines<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            line: 0,
            buf: Vec::new(),
        }
    }
}

impl<R: BufRead> Iterator for SentenceLines<R> {
    type Item = Result<RawLine, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.buf.clear();
        match self.reader.read_until(b'\n', &mut self.buf) {
            Ok(0) => return None,
            Ok(_) => {}
            Err(source) => {
                return Some(Err(CorpusError::Io {
                    path: PathBuf::new(),
                    source,
                }))
            }
        }
        self.line += 1;
        let mut bytes = self.buf.as_slice();
        if let Some(rest) = bytes.strip_suffix(b"\n") {
            bytes = rest;
        }
        if let Some(rest) = bytes.strip_suffix(b"\r") {
            bytes = rest;
        }
        let line = self.line;
        let text = match std::str::from_utf8(bytes) {
            Ok(t) => t,
            Err(e) => {
                return Some(Err(CorpusError::Malformed {
                    line,
                    reason: format!("invalid UTF-8 at byte {}", e.valid_up_to()),
                }))
            }
        };
        if text.contains('\0') {
            return Some(Err(CorpusError::Malformed {
                line,
                reason: "NUL character".to_string(),
            }));
        }
        if text.trim().is_empty() {
            return Some(Ok(RawLine::Blank));
        }
        Some(Ok(RawLine::Text(text.nfc().collect())))
    }
}

fn ends_sentence(text: &str) -> bool {
    matches!(text.chars().last(), Some('.' | '!' | '?'))
}

/// Splits an over-long token sequence after the last sentence-final
/// punctuation within each window, or hard at the window end. Each chunk keeps
/// its slice of the raw text so that chunks concatenate back to `raw`.
fn split_long(raw: &str, pieces: Vec<Piece>) -> Vec<(String, Vec<Piece>)> {
    if pieces.len() <= MAX_SENTENCE_TOKENS {
        return vec![(raw.to_string(), pieces)];
    }
    let chars: Vec<char> = raw.chars().collect();
    let mut chunks = Vec::new();
    let mut rest = pieces;
    let mut char_offset = 0;
    while !rest.is_empty() {
        let take = if rest.len() <= MAX_SENTENCE_TOKENS {
            rest.len()
        } else {
            rest[..MAX_SENTENCE_TOKENS]
                .iter()
                .rposition(|p| ends_sentence(&p.text))
                .map(|i| i + 1)
                .unwrap_or(MAX_SENTENCE_TOKENS)
        };
        let tail = rest.split_off(take);
        let chunk_end = if tail.is_empty() {
            chars.len()
        } else {
            rest.last().map(|p| p.end).unwrap_or(char_offset)
        };
        let chunk_raw: String = chars[char_offset..chunk_end].iter().collect();
        let shifted = rest
            .into_iter()
            .map(|mut p| {
                p.start -= char_offset;
                p.end -= char_offset;
                p
            })
            .collect();
        chunks.push((chunk_raw, shifted));
        char_offset = chunk_end;
        rest = tail;
    }
    chunks
}
