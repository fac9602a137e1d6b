//! Next-token distribution providers.
//!
//! A [`ModelBackend`] answers two questions: how text maps to token ids, and
//! what the next-token distribution is for a given context. The decoding
//! engine only ever talks to this trait.
//!
//! Three implementations ship with the crate:
//!
//! - [`TableModel`]: a deterministic n-gram lookup table, used as a test
//!   oracle and for designed fixtures.
//! - [`RemoteBackend`]: a JSON-over-HTTP client for a logit server that hosts
//!   a real pretrained model.
//! - [`CachedBackend`]: a memoizing wrapper around any other backend.

mod cache;
mod remote;
mod table;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{DistributionError, ProbDist, TokenId};

pub use cache::{cached, CachedBackend, DEFAULT_CACHE_CAPACITY};
pub use remote::{RemoteBackend, RemoteOptions, DEFAULT_MAX_IN_FLIGHT};
pub use table::{TableModel, TableModelFile, DEFAULT_TABLE_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Table,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub model_id: String,
    pub vocab_size: usize,
    pub eos_token: TokenId,
    pub context_limit: usize,
    pub architecture: Architecture,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.vocab_size < 2 {
            return Err(BackendError::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.eos_token.index() >= self.vocab_size {
            return Err(BackendError::Config(format!(
                "eos token {} outside vocabulary of size {}",
                self.eos_token, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// The context for one next-token query.
///
/// `input_tokens` is the tokenized input (original or contrastive);
/// `generated_tokens` is the suffix generated so far, shared between the two
/// contexts of a contrastive step. Decoder-only backends see the
/// concatenation; encoder-decoder backends feed the input to the encoder and
/// the generated suffix to the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextQuery {
    pub input_tokens: Vec<TokenId>,
    pub generated_tokens: Vec<TokenId>,
}

impl ContextQuery {
    pub fn new(input_tokens: Vec<TokenId>, generated_tokens: Vec<TokenId>) -> Self {
        Self { input_tokens, generated_tokens }
    }

    pub fn len(&self) -> usize {
        self.input_tokens.len() + self.generated_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input followed by the generated suffix.
    pub fn concatenated(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.input_tokens.iter().chain(&self.generated_tokens).copied()
    }

    pub(crate) fn check_limit(&self, limit: usize) -> Result<(), BackendError> {
        if self.len() > limit {
            return Err(BackendError::ContextOverflow { len: self.len(), limit });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend at {url} is unreachable: {message}")]
    Unreachable { url: String, message: String },
    #[error("backend returned HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("context of {len} tokens exceeds the limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("tokenization failed: {0}")]
    Tokenize(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

impl BackendError {
    /// Whether repeating the same request may succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            BackendError::Unreachable { .. } => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    pub fn http_status(&self) -> Option<u16> {
        match self {
            BackendError::Http { status, .. } => Some(*status),
            _ => None,
        }
    }
}

/// A provider of next-token distributions.
///
/// Implementations must be deterministic: identical queries yield identical
/// distributions for the lifetime of the value.
pub trait ModelBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError>;

    fn next_token_distribution(&self, query: &ContextQuery) -> Result<ProbDist, BackendError>;
}

macro_rules! forward_backend {
    ($($ty:ty),*) => {$(
        impl<T: ModelBackend + ?Sized> ModelBackend for $ty {
            fn descriptor(&self) -> &BackendDescriptor {
                (**self).descriptor()
            }
            fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
                (**self).tokenize(text)
            }
            fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
                (**self).detokenize(tokens)
            }
            fn next_token_distribution(&self, query: &ContextQuery) -> Result<ProbDist, BackendError> {
                (**self).next_token_distribution(query)
            }
        }
    )*};
}

forward_backend!(&T, Box<T>, Arc<T>);
