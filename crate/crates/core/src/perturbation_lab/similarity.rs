//! Text similarity providers used to compare contrastive continuations.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ureq::Agent;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("similarity service at {url} is unreachable: {message}")]
    Unreachable { url: String, message: String },
    #[error("similarity service returned HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("malformed similarity response: {0}")]
    Protocol(String),
}

impl SimilarityError {
    pub fn is_retriable(&self) -> bool {
        match self {
            SimilarityError::Unreachable { .. } => true,
            SimilarityError::Http { status, .. } => *status == 429 || *status >= 500,
            SimilarityError::Protocol(_) => false,
        }
    }
}

/// A symmetric similarity score in `[-1, 1]` with `sim(a, a) = 1`.
///
/// Providers are shared across sweep worker threads.
pub trait SimilarityProvider: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError>;
}

impl<T: SimilarityProvider + ?Sized> SimilarityProvider for &T {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        (**self).similarity(a, b)
    }
}

impl<T: SimilarityProvider + ?Sized> SimilarityProvider for Box<T> {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        (**self).similarity(a, b)
    }
}

/// Cosine similarity of bag-of-words count vectors.
///
/// Words are whitespace-separated and lowercased. Two empty texts are
/// identical (1.0); an empty and a non-empty text share nothing (0.0).
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlap;

impl TokenOverlap {
    fn bag(text: &str) -> BTreeMap<String, u64> {
        let mut bag = BTreeMap::new();
        for word in text.split_whitespace() {
            *bag.entry(word.to_lowercase()).or_insert(0) += 1;
        }
        bag
    }

    pub fn score(a: &str, b: &str) -> f64 {
        let (bag_a, bag_b) = (Self::bag(a), Self::bag(b));
        match (bag_a.is_empty(), bag_b.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        if bag_a == bag_b {
            return 1.0;
        }
        let dot: u64 = bag_a.iter().map(|(w, &n)| n * bag_b.get(w).copied().unwrap_or(0)).sum();
        let norm = |bag: &BTreeMap<String, u64>| bag.values().map(|&n| n * n).sum::<u64>();
        // Integer dot products keep the score exactly symmetric.
        let denom = ((norm(&bag_a) * norm(&bag_b)) as f64).sqrt();
        (dot as f64 / denom).clamp(-1.0, 1.0)
    }
}

impl SimilarityProvider for TokenOverlap {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(Self::score(a, b))
    }
}

/// Cosine similarity of sentence embeddings served over HTTP.
///
/// Request: `POST {url}` with `{"texts": [a, b]}`.
/// Response: `{"embeddings": [[f32...], [f32...]]}`.
pub struct EmbeddingService {
    url: String,
    agent: Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: [&'a str; 2],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl EmbeddingService {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { url: url.into(), agent }
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

impl SimilarityProvider for EmbeddingService {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        if a == b {
            return Ok(1.0);
        }
        // Fixed argument order makes the score symmetric regardless of how
        // the service batches.
        let (first, second) = if a <= b { (a, b) } else { (b, a) };
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts: [first, second] })
            .map_err(|e| SimilarityError::Unreachable { url: self.url.clone(), message: e.to_string() })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| SimilarityError::Unreachable { url: self.url.clone(), message: e.to_string() })?;
        if !(200..300).contains(&status) {
            return Err(SimilarityError::Http { status, message: body });
        }
        let parsed: EmbedResponse =
            serde_json::from_str(&body).map_err(|e| SimilarityError::Protocol(e.to_string()))?;
        match parsed.embeddings.as_slice() {
            [ea, eb] => cosine(ea, eb)
                .ok_or_else(|| SimilarityError::Protocol("embeddings are empty, zero or of unequal length".into())),
            other => Err(SimilarityError::Protocol(format!("expected 2 embeddings, got {}", other.len()))),
        }
    }
}

/// Which provider to build from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityConfig {
    TokenOverlap,
    EmbeddingService { endpoint: String },
}

impl SimilarityConfig {
    pub fn build(&self) -> Box<dyn SimilarityProvider> {
        match self {
            SimilarityConfig::TokenOverlap => Box::new(TokenOverlap),
            SimilarityConfig::EmbeddingService { endpoint } => {
                Box::new(EmbeddingService::new(endpoint.clone(), Duration::from_secs(60)))
            }
        }
    }
}
