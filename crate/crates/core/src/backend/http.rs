//! Adapter for a generic completion endpoint.
//!
//! Request (`POST {base_url}/v1/completions`):
//!
//! ```json
//! {"model": "...", "prompt": "...", "max_tokens": 48, "temperature": 1.0,
//!  "top_p": 0.95, "n": 5, "seed": 0, "logprobs": 1, "echo": false}
//! ```
//!
//! Response: `{"choices": [{"index": 0, "text": "...", "logprobs":
//! {"tokens": [...], "token_logprobs": [...], "text_offset": [...]}}]}`.
//! `text_offset` counts characters from the start of the echoed prompt.
//!
//! Log-likelihood queries send `prefix + continuation` with `echo: true` and
//! `max_tokens: 0`, then sum the logprobs of tokens starting at or after the
//! end of the prefix.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendKind, LanguageModel, PolicyHandle};
use crate::config::{HttpConfig, SamplingParams};
use crate::error::{validation, Error, Result};

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// JSON client with bounded concurrency and retries with exponential backoff
/// on transport errors, 429 and 5xx.
#[derive(Debug)]
pub struct HttpClient {
    config: HttpConfig,
    client: Client,
    api_key: Option<String>,
    gate: Gate,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(validation("max_in_flight must be at least 1"));
        }
        if config.max_retries == 0 {
            return Err(validation("max_retries must be at least 1"));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Config(format!("environment variable {var} holding the API key is not set")))?,
            ),
            None => None,
        };
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpClient {
            gate: Gate::new(config.max_in_flight),
            config,
            client,
            api_key,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let url = self.url(path);
        self.send(|| self.client.post(&url).json(body))
    }

    pub fn get_json<R: DeserializeOwned>(&self, path: &str) -> Result<R> {
        let url = self.url(path);
        self.send(|| self.client.get(&url))
    }

    fn send<R: DeserializeOwned>(&self, build: impl Fn() -> RequestBuilder) -> Result<R> {
        let attempts = self.config.max_retries;
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let mut request = build();
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let outcome = {
                let _permit = self.gate.acquire();
                request.send().and_then(|r| {
                    let status = r.status();
                    r.text().map(|body| (status, body))
                })
            };
            match outcome {
                Ok((status, body)) if status.is_success() => {
                    return serde_json::from_str(&body)
                        .map_err(|e| self.error(attempt, format!("bad response body: {e}")));
                }
                Ok((status, body)) if retryable(status) => {
                    tracing::warn!(%status, attempt, "retrying request");
                    last = format!("HTTP {status}: {}", truncate(&body));
                }
                Ok((status, body)) => return Err(self.error(attempt, format!("HTTP {status}: {}", truncate(&body)))),
                Err(e) => {
                    tracing::warn!(error = %e, attempt, "retrying request");
                    last = format!("transport: {e}");
                }
            }
        }
        Err(self.error(attempts, last))
    }

    fn error(&self, attempts: u32, message: String) -> Error {
        Error::Backend {
            model: self.config.model.clone(),
            attempts,
            message,
        }
    }
}

fn retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

fn truncate(body: &str) -> &str {
    match body.char_indices().nth(200) {
        Some((i, _)) => &body[..i],
        None => body,
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    top_p: f64,
    n: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    echo: bool,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Debug)]
pub struct HttpBackend {
    handle: PolicyHandle,
    client: HttpClient,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let handle = PolicyHandle::new(BackendKind::Http, config.model.clone());
        Ok(HttpBackend {
            handle,
            client: HttpClient::new(config)?,
        })
    }

    /// Same endpoint, different model (e.g. the output of a finetune job).
    pub fn with_model(&self, model: impl Into<String>) -> Result<Self> {
        let mut config = self.client.config().clone();
        config.model = model.into();
        Self::new(config)
    }

    fn echo_logprob(&self, prefix: &str, continuation: &str) -> Result<f64> {
        let text = format!("{prefix}{continuation}");
        let response: CompletionResponse = self.client.post_json(
            "/v1/completions",
            &CompletionRequest {
                model: &self.handle.model_id,
                prompt: &text,
                max_tokens: 0,
                temperature: 1.0,
                top_p: 1.0,
                n: 1,
                seed: 0,
                logprobs: Some(1),
                echo: true,
            },
        )?;
        let lp = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| Error::Capability {
                model: self.handle.model_id.clone(),
                capability: "echoed token log-probabilities".into(),
            })?;
        let start = prefix.chars().count();
        let mut total = 0.0;
        let mut seen = false;
        for (offset, value) in lp.text_offset.iter().zip(&lp.token_logprobs) {
            if *offset >= start {
                seen = true;
                total += value.ok_or_else(|| Error::Capability {
                    model: self.handle.model_id.clone(),
                    capability: "log-probability of every continuation token".into(),
                })?;
            }
        }
        if !seen {
            return Err(self.client.error(1, "response holds no continuation tokens".into()));
        }
        Ok(total)
    }
}

impl LanguageModel for HttpBackend {
    fn handle(&self) -> &PolicyHandle {
        &self.handle
    }

    fn generate(&self, prompt: &str, params: &SamplingParams, n: usize) -> Result<Vec<String>> {
        let response: CompletionResponse = self.client.post_json(
            "/v1/completions",
            &CompletionRequest {
                model: &self.handle.model_id,
                prompt,
                max_tokens: params.max_tokens,
                temperature: params.temperature,
                top_p: params.top_p,
                n,
                seed: params.seed,
                logprobs: None,
                echo: false,
            },
        )?;
        let mut choices = response.choices;
        choices.sort_by_key(|c| c.index);
        Ok(choices.into_iter().map(|c| c.text).collect())
    }

    fn label_logprob(&self, prompt: &str, label: &str) -> Result<Option<f64>> {
        self.echo_logprob(prompt, label).map(Some)
    }

    fn sequence_logprob(&self, prefix: &str, continuation: &str) -> Result<f64> {
        self.echo_logprob(prefix, continuation)
    }
}
