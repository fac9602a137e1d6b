//! Client for the logit server wire protocol.
//!
//! | endpoint | request | response |
//! |---|---|---|
//! | `GET /v1/models` | | `{"models": [{"id", "architecture", "vocab_size", "context_limit"}]}` |
//! | `POST /v1/tokenize` | `{"model", "text"}` | `{"token_ids": [int]}` |
//! | `POST /v1/detokenize` | `{"model", "token_ids"}` | `{"text": str}` |
//! | `POST /v1/next_logprobs` | `{"model", "input_ids", "generated_ids", "top_n"}` | `{"logprobs", "vocab_size", "eos_id"}` |
//!
//! `logprobs` is either a dense array of length `vocab_size` or, when
//! `top_n` is set, a list of `[token_id, logprob]` pairs.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{Architecture, BackendDescriptor, BackendError, BackendKind, ContextQuery, ModelBackend};
use crate::distribution::{ProbDist, TokenId};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// Request sparse top-N responses instead of dense vectors. Must be at
    /// least the decoding top-K for results to match dense mode.
    pub top_n: Option<usize>,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self { top_n: None, max_in_flight: DEFAULT_MAX_IN_FLIGHT, timeout: Duration::from_secs(120) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelEntry {
    id: String,
    architecture: Architecture,
    vocab_size: usize,
    context_limit: usize,
    #[serde(default)]
    eos_id: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct ModelsResponse {
    models: Vec<ModelEntry>,
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    model: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    token_ids: Vec<u32>,
}

#[derive(Serialize)]
struct DetokenizeRequest<'a> {
    model: &'a str,
    token_ids: Vec<u32>,
}

#[derive(Deserialize)]
struct DetokenizeResponse {
    text: String,
}

#[derive(Serialize)]
struct LogprobsRequest<'a> {
    model: &'a str,
    input_ids: Vec<u32>,
    generated_ids: Vec<u32>,
    top_n: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Logprobs {
    Dense(Vec<f64>),
    Sparse(Vec<(u32, f64)>),
}

#[derive(Deserialize)]
struct LogprobsResponse {
    logprobs: Logprobs,
    vocab_size: usize,
    eos_id: u32,
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// A model hosted by a logit server.
pub struct RemoteBackend {
    base_url: String,
    agent: Agent,
    descriptor: BackendDescriptor,
    options: RemoteOptions,
    in_flight: InFlight,
}

impl RemoteBackend {
    /// Reads `/v1/models` and binds to `model_id`, or to the first advertised
    /// model when `model_id` is `None`.
    ///
    /// If the model entry does not advertise `eos_id`, one probe request to
    /// `/v1/next_logprobs` (input `[0]`, `top_n = 1`) recovers it.
    pub fn connect(
        base_url: &str,
        model_id: Option<&str>,
        options: RemoteOptions,
    ) -> Result<Self, BackendError> {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(options.timeout))
            .build()
            .into();
        let base_url = base_url.trim_end_matches('/').to_string();
        let placeholder = BackendDescriptor {
            kind: BackendKind::Remote,
            model_id: String::new(),
            vocab_size: 0,
            eos_token: TokenId(0),
            context_limit: 0,
            architecture: Architecture::DecoderOnly,
        };
        let mut backend = Self {
            base_url,
            agent,
            descriptor: placeholder,
            in_flight: InFlight::new(options.max_in_flight),
            options,
        };

        let models: ModelsResponse = backend.get("/v1/models")?;
        let entry = match model_id {
            Some(id) => models.models.into_iter().find(|m| m.id == id).ok_or_else(|| {
                BackendError::Config(format!("model {id:?} is not served at {}", backend.base_url))
            })?,
            None => models.models.into_iter().next().ok_or_else(|| {
                BackendError::Protocol("server advertises no models".into())
            })?,
        };
        backend.descriptor = BackendDescriptor {
            kind: BackendKind::Remote,
            model_id: entry.id,
            vocab_size: entry.vocab_size,
            eos_token: TokenId(entry.eos_id.unwrap_or(0)),
            context_limit: entry.context_limit,
            architecture: entry.architecture,
        };
        if entry.eos_id.is_none() {
            let probe: LogprobsResponse = backend.post(
                "/v1/next_logprobs",
                &LogprobsRequest {
                    model: &backend.descriptor.model_id,
                    input_ids: vec![0],
                    generated_ids: vec![],
                    top_n: Some(1),
                },
            )?;
            backend.descriptor.eos_token = TokenId(probe.eos_id);
        }
        backend.descriptor.validate()?;
        Ok(backend)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, BackendError> {
        let _permit = self.in_flight.acquire();
        let url = self.url(path);
        let response = self.agent.get(&url).call().map_err(|e| transport_error(&url, e))?;
        read_response(&url, response)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, BackendError> {
        let _permit = self.in_flight.acquire();
        let url = self.url(path);
        let response = self.agent.post(&url).send_json(body).map_err(|e| transport_error(&url, e))?;
        read_response(&url, response)
    }
}

fn transport_error(url: &str, err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(status) => BackendError::Http { status, message: String::new() },
        ureq::Error::Json(e) => BackendError::Protocol(e.to_string()),
        other => BackendError::Unreachable { url: url.to_string(), message: other.to_string() },
    }
}

fn read_response<T: DeserializeOwned>(
    url: &str,
    mut response: ureq::http::Response<ureq::Body>,
) -> Result<T, BackendError> {
    let status = response.status().as_u16();
    let body = response
        .body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_to_string()
        .map_err(|e| transport_error(url, e))?;
    if !(200..300).contains(&status) {
        return Err(BackendError::Http { status, message: body });
    }
    serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("{url}: {e}")))
}

fn ids(tokens: &[TokenId]) -> Vec<u32> {
    tokens.iter().map(|t| t.0).collect()
}

impl ModelBackend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let resp: TokenizeResponse = self.post(
            "/v1/tokenize",
            &TokenizeRequest { model: &self.descriptor.model_id, text },
        )?;
        if resp.token_ids.len() > self.descriptor.context_limit {
            return Err(BackendError::ContextOverflow {
                len: resp.token_ids.len(),
                limit: self.descriptor.context_limit,
            });
        }
        Ok(resp.token_ids.into_iter().map(TokenId).collect())
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        let resp: DetokenizeResponse = self.post(
            "/v1/detokenize",
            &DetokenizeRequest { model: &self.descriptor.model_id, token_ids: ids(tokens) },
        )?;
        Ok(resp.text)
    }

    fn next_token_distribution(&self, query: &ContextQuery) -> Result<ProbDist, BackendError> {
        query.check_limit(self.descriptor.context_limit)?;
        let resp: LogprobsResponse = self.post(
            "/v1/next_logprobs",
            &LogprobsRequest {
                model: &self.descriptor.model_id,
                input_ids: ids(&query.input_tokens),
                generated_ids: ids(&query.generated_tokens),
                top_n: self.options.top_n,
            },
        )?;
        let vocab_size = self.descriptor.vocab_size;
        if resp.vocab_size != vocab_size {
            return Err(BackendError::Protocol(format!(
                "response vocab_size {} differs from advertised {vocab_size}",
                resp.vocab_size
            )));
        }
        if resp.eos_id != self.descriptor.eos_token.0 {
            return Err(BackendError::Protocol(format!(
                "response eos_id {} differs from {}",
                resp.eos_id, self.descriptor.eos_token
            )));
        }
        let dist = match resp.logprobs {
            Logprobs::Dense(lp) => {
                if lp.len() != vocab_size {
                    return Err(BackendError::Protocol(format!(
                        "dense logprobs have length {}, expected {vocab_size}",
                        lp.len()
                    )));
                }
                ProbDist::from_logprobs(&lp)?
            }
            Logprobs::Sparse(pairs) => ProbDist::from_sparse(
                vocab_size,
                pairs.into_iter().map(|(id, lp)| (TokenId(id), lp.exp())),
            )?,
        };
        Ok(dist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logprobs_parse_dense_and_sparse() {
        let dense: LogprobsResponse =
            serde_json::from_str(r#"{"logprobs": [-0.5, -1.0], "vocab_size": 2, "eos_id": 1}"#).unwrap();
        assert!(matches!(dense.logprobs, Logprobs::Dense(ref v) if v.len() == 2));
        let sparse: LogprobsResponse =
            serde_json::from_str(r#"{"logprobs": [[3, -0.1], [0, -2.5]], "vocab_size": 5, "eos_id": 4}"#)
                .unwrap();
        assert!(matches!(sparse.logprobs, Logprobs::Sparse(ref v) if v == &[(3, -0.1), (0, -2.5)]));
    }

    #[test]
    fn request_serializes_null_top_n() {
        let req = LogprobsRequest { model: "m", input_ids: vec![1], generated_ids: vec![], top_n: None };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"model":"m","input_ids":[1],"generated_ids":[],"top_n":null}"#
        );
    }

    #[test]
    fn unreachable_server_is_retriable() {
        // Port 9 (discard) on localhost is essentially never listening.
        let err = RemoteBackend::connect(
            "http://127.0.0.1:9",
            None,
            RemoteOptions { timeout: Duration::from_secs(2), ..Default::default() },
        )
        .err()
        .unwrap();
        assert!(err.is_retriable(), "{err:?}");
    }

    #[test]
    fn in_flight_limit_blocks() {
        let gate = InFlight::new(1);
        let first = gate.acquire();
        std::thread::scope(|s| {
            let handle = s.spawn(|| {
                let _p = gate.acquire();
            });
            std::thread::sleep(Duration::from_millis(20));
            assert!(!handle.is_finished());
            drop(first);
            handle.join().unwrap();
        });
    }
}
