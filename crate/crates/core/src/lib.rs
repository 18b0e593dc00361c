//! Token-level image retrieval ("vokenization") over text corpora.
//!
//! The pipeline: tokenize a corpus ([`corpus`]), train a token-image matcher
//! on caption pairs ([`matcher`]), index the projected images ([`index`]),
//! assign each token its most relevant image, and carry those assignments
//! across tokenizers ([`revokenize`]). [`stats`], [`baselines`] and
//! [`supervision`] cover corpus analysis, non-contextual labelings and the
//! downstream loss arithmetic. [`storage`] defines the on-disk formats.

pub mod baselines;
pub mod corpus;
pub mod features;
pub mod index;
pub mod matcher;
pub mod revokenize;
pub mod seed;
pub mod stats;
pub mod storage;
pub mod supervision;
pub mod synthetic;
pub mod tokenizer;
