//! Tokenizers that keep character-span provenance.
//!
//! Offsets are counted in Unicode scalar values of the raw sentence, never in
//! bytes. Every tokenizer here maps each raw character to at most one output
//! character, so a token's span always covers exactly the raw characters that
//! produced it.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

/// Continuation marker for non-initial word pieces.
pub const CONTINUATION_PREFIX: &str = "##";

/// Unknown-word token for vocabulary-backed tokenizers.
pub const UNK_TOKEN: &str = "[UNK]";

/// Words longer than this (in characters) become a single unknown token.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("tokenizer `{0}` is already registered")]
    Duplicate(String),
    #[error("unknown tokenizer `{requested}`; registered: {registered}")]
    Unknown {
        requested: String,
        registered: String,
    },
    #[error("cannot read vocabulary file {path}: {source}")]
    VocabFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary file {0} is empty")]
    EmptyVocab(PathBuf),
}

/// A token produced by a tokenizer before type ids are resolved against a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub start: usize,
    pub end: usize,
    /// Vocabulary index, for tokenizers with a closed vocabulary.
    pub id: Option<u32>,
}

pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn tokenize(&self, raw: &str) -> Vec<Piece>;

    /// Size of the closed vocabulary, or `None` for open-vocabulary tokenizers
    /// whose type ids are assigned per corpus.
    fn vocab_size(&self) -> Option<usize>;
}

/// Rules accepted by [`TokenizerRegistry::register`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerSpec {
    /// Split on whitespace only.
    Whitespace { lowercase: bool },
    /// Split on whitespace, and emit every punctuation character as its own token.
    Basic { lowercase: bool },
    /// Basic pre-tokenization followed by greedy longest-match subword
    /// segmentation over a vocabulary file with one entry per line.
    WordPiece { vocab: PathBuf, lowercase: bool },
}

pub fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    // Combining diacritical marks are not punctuation.
    if ('\u{0300}'..='\u{036F}').contains(&c) {
        return false;
    }
    !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control()
}

/// True when every character of `text` is punctuation.
pub fn is_punctuation_token(text: &str) -> bool {
    !text.is_empty() && text.chars().all(is_punctuation)
}

fn normalize_char(c: char, lowercase: bool) -> char {
    if !lowercase {
        return c;
    }
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Splits `chars` into (start, end) word ranges, optionally isolating punctuation.
fn split_words(chars: &[char], split_punct: bool) -> Vec<(usize, usize)> {
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() || c.is_control() {
            if let Some(s) = start.take() {
                words.push((s, i));
            }
        } else if split_punct && is_punctuation(c) {
            if let Some(s) = start.take() {
                words.push((s, i));
            }
            words.push((i, i + 1));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        words.push((s, chars.len()));
    }
    words
}

#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    lowercase: bool,
    split_punct: bool,
}

impl WhitespaceTokenizer {
    pub fn new(lowercase: bool) -> Self {
        Self {
            lowercase,
            split_punct: false,
        }
    }

    /// Whitespace splitting plus one token per punctuation character.
    pub fn basic(lowercase: bool) -> Self {
        Self {
            lowercase,
            split_punct: true,
        }
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, raw: &str) -> Vec<Piece> {
        let chars: Vec<char> = raw.chars().collect();
        split_words(&chars, self.split_punct)
            .into_iter()
            .map(|(start, end)| Piece {
                text: chars[start..end]
                    .iter()
                    .map(|&c| normalize_char(c, self.lowercase))
                    .collect(),
                start,
                end,
                id: None,
            })
            .collect()
    }

    fn vocab_size(&self) -> Option<usize> {
        None
    }
}

/// Greedy longest-match-first subword tokenizer.
#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: HashMap<String, u32>,
    size: usize,
    unk_id: u32,
    lowercase: bool,
}

impl WordPieceTokenizer {
    /// Builds a tokenizer from vocabulary entries in id order. `[UNK]` is
    /// appended when absent.
    pub fn from_entries<I, S>(entries: I, lowercase: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = HashMap::new();
        let mut size = 0usize;
        for entry in entries {
            let entry = entry.into();
            vocab.entry(entry).or_insert(size as u32);
            size += 1;
        }
        let unk_id = match vocab.get(UNK_TOKEN) {
            Some(&id) => id,
            None => {
                vocab.insert(UNK_TOKEN.to_string(), size as u32);
                size += 1;
                (size - 1) as u32
            }
        };
        Self {
            vocab,
            size,
            unk_id,
            lowercase,
        }
    }

    pub fn from_file(path: &std::path::Path, lowercase: bool) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::VocabFile {
            path: path.to_path_buf(),
            source,
        })?;
        let entries: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if entries.is_empty() {
            return Err(TokenizerError::EmptyVocab(path.to_path_buf()));
        }
        Ok(Self::from_entries(entries, lowercase))
    }

    fn segment_word(&self, word: &[char], offset: usize, out: &mut Vec<Piece>) {
        let unk = |out: &mut Vec<Piece>| {
            out.push(Piece {
                text: UNK_TOKEN.to_string(),
                start: offset,
                end: offset + word.len(),
                id: Some(self.unk_id),
            })
        };
        if word.len() > MAX_WORD_CHARS {
            unk(out);
            return;
        }
        let first = out.len();
        let mut start = 0;
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while start < end {
                let mut candidate: String = word[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, CONTINUATION_PREFIX);
                }
                if let Some(&id) = self.vocab.get(&candidate) {
                    found = Some((candidate, id));
                    break;
                }
                end -= 1;
            }
            match found {
                Some((text, id)) => {
                    out.push(Piece {
                        text,
                        start: offset + start,
                        end: offset + end,
                        id: Some(id),
                    });
                    start = end;
                }
                None => {
                    out.truncate(first);
                    unk(out);
                    return;
                }
            }
        }
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn tokenize(&self, raw: &str) -> Vec<Piece> {
        let chars: Vec<char> = raw
            .chars()
            .map(|c| normalize_char(c, self.lowercase))
            .collect();
        let mut out = Vec::new();
        for (start, end) in split_words(&chars, true) {
            self.segment_word(&chars[start..end], start, &mut out);
        }
        out
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.size)
    }
}

/// Named tokenizers available to the corpus loader.
#[derive(Debug, Clone)]
pub struct TokenizerRegistry {
    tokenizers: HashMap<String, Arc<dyn Tokenizer>>,
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl TokenizerRegistry {
    pub fn empty() -> Self {
        Self {
            tokenizers: HashMap::new(),
        }
    }

    /// Registry holding `whitespace` (lowercasing) and `basic` (lowercasing,
    /// punctuation split).
    pub fn with_defaults() -> Self {
        let mut registry = Self::empty();
        registry
            .register("whitespace", TokenizerSpec::Whitespace { lowercase: true })
            .expect("fresh registry");
        registry
            .register("basic", TokenizerSpec::Basic { lowercase: true })
            .expect("fresh registry");
        registry
    }

    pub fn register(&mut self, id: &str, spec: TokenizerSpec) -> Result<(), TokenizerError> {
        if self.tokenizers.contains_key(id) {
            return Err(TokenizerError::Duplicate(id.to_string()));
        }
        let tokenizer: Arc<dyn Tokenizer> = match spec {
            TokenizerSpec::Whitespace { lowercase } => {
                Arc::new(WhitespaceTokenizer::new(lowercase))
            }
            TokenizerSpec::Basic { lowercase } => Arc::new(WhitespaceTokenizer::basic(lowercase)),
            TokenizerSpec::WordPiece { vocab, lowercase } => {
                Arc::new(WordPieceTokenizer::from_file(&vocab, lowercase)?)
            }
        };
        self.tokenizers.insert(id.to_string(), tokenizer);
        Ok(())
    }

    /// Registers an already-built tokenizer.
    pub fn insert(
        &mut self,
        id: &str,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Result<(), TokenizerError> {
        if self.tokenizers.contains_key(id) {
            return Err(TokenizerError::Duplicate(id.to_string()));
        }
        self.tokenizers.insert(id.to_string(), tokenizer);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Tokenizer>, TokenizerError> {
        self.tokenizers
            .get(id)
            .cloned()
            .ok_or_else(|| TokenizerError::Unknown {
                requested: id.to_string(),
                registered: self.ids().join(", "),
            })
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.tokenizers.keys().cloned().collect();
        ids.sort();
        ids
    }
}
