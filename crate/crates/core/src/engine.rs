//! The dual-context decoding loop.
//!
//! At step `i` the engine queries the backend twice, once with the original
//! input and once with the contrastive input, both followed by the same
//! generated suffix. The two distributions go through [`apply_cid`], the
//! argmax token is appended to the shared suffix, and the loop repeats until
//! EOS or the token budget runs out.
//!
//! [`apply_cid`]: crate::distribution::apply_cid

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{cached, BackendError, ContextQuery, ModelBackend, DEFAULT_CACHE_CAPACITY};
use crate::distribution::{apply_cid_detailed, argmax_token, CidParams, DistributionError, TokenId};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeLimits {
    pub max_new_tokens: usize,
    pub stop_on_eos: bool,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        Self { max_new_tokens: DEFAULT_MAX_NEW_TOKENS, stop_on_eos: true }
    }
}

impl DecodeLimits {
    pub fn new(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, ..Self::default() }
    }
}

/// A contrastive generation request: continue `input_text` while pushing
/// away from what `contrast_text` would produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeJob {
    pub input_text: String,
    pub contrast_text: String,
    pub params: CidParams,
    pub limits: DecodeLimits,
}

impl DecodeJob {
    pub fn new(input_text: impl Into<String>, contrast_text: impl Into<String>, params: CidParams) -> Self {
        Self {
            input_text: input_text.into(),
            contrast_text: contrast_text.into(),
            params,
            limits: DecodeLimits::default(),
        }
    }

    pub fn with_limits(mut self, limits: DecodeLimits) -> Self {
        self.limits = limits;
        self
    }

    fn validate(&self) -> Result<(), DecodeError> {
        self.params.validate().map_err(|e| DecodeError::InvalidJob(e.to_string()))?;
        if self.limits.max_new_tokens == 0 {
            return Err(DecodeError::InvalidJob("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// What happened at one decoding step, for the chosen token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step_index: usize,
    pub chosen: TokenId,
    pub p_chosen: f64,
    pub p_contrast_chosen: f64,
    pub delta_chosen: f64,
    pub p_tilde_chosen: f64,
    /// `log Z` of the reweighted distribution at this step.
    pub log_normalizer: f64,
}

impl StepTrace {
    /// Recomputes `p_tilde_chosen` from the traced quantities.
    pub fn recompute_p_tilde(&self, lambda: f64) -> f64 {
        (self.p_chosen.ln() + lambda * self.delta_chosen - self.log_normalizer).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Generated ids; ends with EOS when `stop_reason` is `Eos`.
    pub generated_tokens: Vec<TokenId>,
    /// Detokenized continuation, EOS excluded.
    pub generated_text: String,
    pub trace: Vec<StepTrace>,
    pub stop_reason: StopReason,
}

impl DecodeResult {
    fn empty() -> Self {
        Self {
            generated_tokens: Vec::new(),
            generated_text: String::new(),
            trace: Vec::new(),
            stop_reason: StopReason::MaxTokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("invalid decode job: {0}")]
    InvalidJob(String),
    #[error("failed to tokenize the {which} text: {source}")]
    Tokenize {
        which: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("backend failed at step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: BackendError,
        partial: Box<DecodeResult>,
    },
}

impl DecodeError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            DecodeError::Tokenize { source, .. } | DecodeError::Backend { source, .. } => Some(source),
            DecodeError::InvalidJob(_) => None,
        }
    }

    pub fn partial(&self) -> Option<&DecodeResult> {
        match self {
            DecodeError::Backend { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// Plain top-K greedy decoding of `input_text`.
pub fn greedy_decode<B: ModelBackend + ?Sized>(
    backend: &B,
    input_text: &str,
    limits: DecodeLimits,
    top_k: usize,
) -> Result<DecodeResult, DecodeError> {
    let params = CidParams::new(0.0, top_k).map_err(|e| DecodeError::InvalidJob(e.to_string()))?;
    if limits.max_new_tokens == 0 {
        return Err(DecodeError::InvalidJob("max_new_tokens must be >= 1".into()));
    }
    let input = tokenize(backend, input_text, "input")?;
    decode_tokens(backend, &input, None, params, limits)
}

/// Contrastive input decoding of `job.input_text` against `job.contrast_text`.
pub fn cid_decode<B: ModelBackend + ?Sized>(backend: &B, job: &DecodeJob) -> Result<DecodeResult, DecodeError> {
    job.validate()?;
    let input = tokenize(backend, &job.input_text, "input")?;
    let contrast = tokenize(backend, &job.contrast_text, "contrast")?;
    decode_tokens(backend, &input, Some(&contrast), job.params, job.limits)
}

/// Both directions, `CID(x; x')` and `CID(x'; x)`, through one shared cache.
pub fn contrast_pair<B: ModelBackend + ?Sized>(
    backend: &B,
    input_text: &str,
    contrast_text: &str,
    params: CidParams,
    limits: DecodeLimits,
) -> Result<(DecodeResult, DecodeResult), DecodeError> {
    let shared = cached(backend, DEFAULT_CACHE_CAPACITY);
    contrast_pair_uncached(&shared, input_text, contrast_text, params, limits)
}

/// [`contrast_pair`] without installing a cache; callers that already share
/// one across many pairs use this.
pub fn contrast_pair_uncached<B: ModelBackend + ?Sized>(
    backend: &B,
    input_text: &str,
    contrast_text: &str,
    params: CidParams,
    limits: DecodeLimits,
) -> Result<(DecodeResult, DecodeResult), DecodeError> {
    let forward = DecodeJob { input_text: input_text.into(), contrast_text: contrast_text.into(), params, limits };
    forward.validate()?;
    let x = tokenize(backend, input_text, "input")?;
    let x_contrast = tokenize(backend, contrast_text, "contrast")?;
    let a = decode_tokens(backend, &x, Some(&x_contrast), params, limits)?;
    let b = decode_tokens(backend, &x_contrast, Some(&x), params, limits)?;
    Ok((a, b))
}

fn tokenize<B: ModelBackend + ?Sized>(
    backend: &B,
    text: &str,
    which: &'static str,
) -> Result<Vec<TokenId>, DecodeError> {
    backend.tokenize(text).map_err(|source| DecodeError::Tokenize { which, source })
}

/// The decoding loop over pre-tokenized inputs. `contrast = None` means the
/// contrastive context is the input itself, i.e. greedy decoding.
pub fn decode_tokens<B: ModelBackend + ?Sized>(
    backend: &B,
    input: &[TokenId],
    contrast: Option<&[TokenId]>,
    params: CidParams,
    limits: DecodeLimits,
) -> Result<DecodeResult, DecodeError> {
    let eos = backend.descriptor().eos_token;
    let mut result = DecodeResult::empty();
    let mut generated: Vec<TokenId> = Vec::with_capacity(limits.max_new_tokens);

    let fail = |step: usize, source: BackendError, result: &DecodeResult, generated: &[TokenId]| {
        let mut partial = result.clone();
        partial.generated_tokens = generated.to_vec();
        partial.generated_text = render_text(backend, generated, eos).unwrap_or_default();
        DecodeError::Backend { step, source, partial: Box::new(partial) }
    };

    for step in 0..limits.max_new_tokens {
        let query = ContextQuery::new(input.to_vec(), generated.clone());
        let p = backend
            .next_token_distribution(&query)
            .map_err(|e| fail(step, e, &result, &generated))?;
        let p_contrast = match contrast {
            Some(contrast) => {
                let contrast_query = ContextQuery::new(contrast.to_vec(), generated.clone());
                debug_assert_eq!(contrast_query.generated_tokens, query.generated_tokens);
                backend
                    .next_token_distribution(&contrast_query)
                    .map_err(|e| fail(step, e, &result, &generated))?
            }
            None => p.clone(),
        };

        let out = match apply_cid_detailed(&p, &p_contrast, params) {
            Ok(out) => out,
            // Nothing left to choose from: end the continuation here.
            Err(DistributionError::ZeroMass { .. }) => break,
            Err(e) => return Err(fail(step, e.into(), &result, &generated)),
        };
        let chosen = argmax_token(&out.dist).map_err(|e| fail(step, e.into(), &result, &generated))?;

        let p_chosen = p.prob(chosen);
        let p_contrast_chosen = p_contrast.prob(chosen);
        result.trace.push(StepTrace {
            step_index: step,
            chosen,
            p_chosen,
            p_contrast_chosen,
            delta_chosen: p_chosen - p_contrast_chosen,
            p_tilde_chosen: out.dist.prob(chosen),
            log_normalizer: out.log_normalizer,
        });
        generated.push(chosen);

        if limits.stop_on_eos && chosen == eos {
            result.stop_reason = StopReason::Eos;
            break;
        }
    }

    result.generated_text = render_text(backend, &generated, eos)
        .map_err(|e| fail(generated.len(), e, &result, &generated))?;
    result.generated_tokens = generated;
    Ok(result)
}

fn render_text<B: ModelBackend + ?Sized>(
    backend: &B,
    generated: &[TokenId],
    eos: TokenId,
) -> Result<String, BackendError> {
    let visible: Vec<TokenId> = generated.iter().copied().filter(|&t| t != eos).collect();
    if visible.is_empty() {
        return Ok(String::new());
    }
    backend.detokenize(&visible)
}
