//! Chat-completion gateway.
//!
//! Three backends share one entry point: `live` talks to an OpenAI-compatible
//! chat-completions endpoint, `record` does the same and appends every
//! exchange to a cassette file, and `replay` answers from a cassette by exact
//! request digest without touching the network.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Mutex;

use crate::prompt::PromptBundle;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider error (HTTP {status}): {message}")]
    Provider { status: u16, message: String },
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("replay cache miss for request {digest}")]
    CacheMiss { digest: String },
    #[error("cassette {path}: {message}")]
    Cassette { path: String, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
        }
    }
}

impl std::ops::Add for Usage {
    type Output = Usage;
    fn add(self, rhs: Usage) -> Usage {
        Usage::new(
            self.input_tokens + rhs.input_tokens,
            self.output_tokens + rhs.output_tokens,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: Usage,
    pub model_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRates {
    pub per_1k_input: Decimal,
    pub per_1k_output: Decimal,
    #[serde(default = "default_currency")]
    pub currency: String,
}

fn default_currency() -> String {
    "EUR".into()
}

impl CostRates {
    pub fn new(per_1k_input: Decimal, per_1k_output: Decimal, currency: impl Into<String>) -> Self {
        Self {
            per_1k_input,
            per_1k_output,
            currency: currency.into(),
        }
    }
}

impl Default for CostRates {
    /// 0.01 per 1K input tokens, 0.03 per 1K output tokens.
    fn default() -> Self {
        Self::new(Decimal::new(1, 2), Decimal::new(3, 2), default_currency())
    }
}

/// `in/1000 * rate_in + out/1000 * rate_out`, rounded half-up to 4 decimals.
pub fn cost_of(usage: Usage, rates: &CostRates) -> Decimal {
    let thousand = Decimal::from(1000);
    let cost = Decimal::from(usage.input_tokens) / thousand * rates.per_1k_input
        + Decimal::from(usage.output_tokens) / thousand * rates.per_1k_output;
    cost.round_dp_with_strategy(4, RoundingStrategy::MidpointAwayFromZero)
        .normalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_max_output_tokens() -> u32 {
    4096
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
        }
    }
}

#[derive(Serialize)]
struct DigestInput<'a> {
    model_id: &'a str,
    system: String,
    user: String,
    temperature: f64,
    max_output_tokens: u32,
}

/// SHA-256 over the canonicalized request. Line endings are normalized to
/// LF; any other whitespace difference changes the digest.
pub fn request_digest(bundle: &PromptBundle, params: &CompletionParams, model_id: &str) -> String {
    let canon = |s: &str| s.replace("\r\n", "\n").replace('\r', "\n");
    let input = DigestInput {
        model_id,
        system: canon(&bundle.system),
        user: canon(&bundle.user),
        temperature: params.temperature,
        max_output_tokens: params.max_output_tokens,
    };
    let json = serde_json::to_vec(&input).expect("digest input serializes");
    hex::encode(Sha256::digest(&json))
}

// ---------------------------------------------------------------------------
// Cassettes

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_digest: String,
    pub response: ModelResponse,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cassette {
    entries: Vec<CassetteEntry>,
    index: HashMap<String, usize>,
}

impl Cassette {
    pub fn from_entries(entries: Vec<CassetteEntry>) -> Result<Self, String> {
        let mut cassette = Cassette::default();
        for entry in entries {
            if cassette.index.contains_key(&entry.request_digest) {
                return Err(format!("duplicate request digest {}", entry.request_digest));
            }
            cassette.upsert(entry);
        }
        Ok(cassette)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let err = |message: String| GatewayError::Cassette {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let entries: Vec<CassetteEntry> =
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::from_entries(entries).map_err(err)
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let json = serde_json::to_string_pretty(&self.entries).expect("cassette serializes");
        std::fs::write(path, json + "\n").map_err(|e| GatewayError::Cassette {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn get(&self, digest: &str) -> Option<&ModelResponse> {
        self.index.get(digest).map(|&i| &self.entries[i].response)
    }

    /// Inserts, or replaces the response of an existing digest.
    pub fn upsert(&mut self, entry: CassetteEntry) {
        match self.index.get(&entry.request_digest) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(entry.request_digest.clone(), self.entries.len());
                self.entries.push(entry);
            }
        }
    }

    pub fn entries(&self) -> &[CassetteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Live,
    #[default]
    Replay,
    Record,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Backend::Live),
            "replay" => Ok(Backend::Replay),
            "record" => Ok(Backend::Record),
            other => Err(format!("unknown backend `{other}` (live, replay, record)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 1000,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1 << attempt.min(16)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub backend: Backend,
    /// Full URL of the chat-completions endpoint.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    /// Environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Set programmatically; never read from a config file.
    #[serde(skip)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    #[serde(default = "default_request_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub params: CompletionParams,
}

fn default_model_id() -> String {
    "gpt-4-1106-preview".into()
}

fn default_api_key_env() -> String {
    "ATGEN_API_KEY".into()
}

fn default_request_timeout() -> u64 {
    120
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Replay,
            endpoint: None,
            model_id: default_model_id(),
            api_key_env: default_api_key_env(),
            api_key: None,
            cassette: None,
            timeout_secs: default_request_timeout(),
            retry: RetryPolicy::default(),
            params: CompletionParams::default(),
        }
    }
}

impl GatewayConfig {
    pub fn replay(cassette: impl Into<PathBuf>) -> Self {
        Self {
            backend: Backend::Replay,
            cassette: Some(cassette.into()),
            ..Self::default()
        }
    }

    pub fn live(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            backend: Backend::Live,
            endpoint: Some(endpoint.into()),
            api_key: Some(api_key.into()),
            ..Self::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct ErrorEnvelope {
    error: ErrorBody,
}

#[derive(Deserialize)]
struct ErrorBody {
    message: String,
}

// ---------------------------------------------------------------------------
// Gateway

struct LiveClient {
    http: reqwest::Client,
    endpoint: String,
    api_key: String,
}

#[derive(Default)]
struct UsageCounters {
    completions: AtomicU64,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
}

/// Safe to share across tasks; record-mode cassette writes are serialized.
pub struct Gateway {
    backend: Backend,
    model_id: String,
    params: CompletionParams,
    retry: RetryPolicy,
    live: Option<LiveClient>,
    cassette: Arc<Mutex<Cassette>>,
    cassette_path: Option<PathBuf>,
    counters: UsageCounters,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend)
            .field("model_id", &self.model_id)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        let live = match config.backend {
            Backend::Replay => None,
            Backend::Live | Backend::Record => {
                let endpoint = config
                    .endpoint
                    .clone()
                    .ok_or_else(|| GatewayError::Config("live backend needs an endpoint".into()))?;
                let api_key = match config.api_key.clone() {
                    Some(key) => key,
                    None => std::env::var(&config.api_key_env).map_err(|_| {
                        GatewayError::Config(format!(
                            "environment variable {} is not set",
                            config.api_key_env
                        ))
                    })?,
                };
                let http = reqwest::Client::builder()
                    .timeout(Duration::from_secs(config.timeout_secs.max(1)))
                    .build()
                    .map_err(|e| GatewayError::Config(e.to_string()))?;
                Some(LiveClient {
                    http,
                    endpoint,
                    api_key,
                })
            }
        };

        let cassette = match (&config.backend, &config.cassette) {
            (Backend::Replay, None) => {
                return Err(GatewayError::Config("replay backend needs a cassette".into()))
            }
            (Backend::Record, None) => {
                return Err(GatewayError::Config("record backend needs a cassette path".into()))
            }
            (Backend::Record, Some(path)) if !path.exists() => Cassette::default(),
            (_, Some(path)) => Cassette::load(path)?,
            (Backend::Live, None) => Cassette::default(),
        };

        Ok(Self {
            backend: config.backend,
            model_id: config.model_id,
            params: config.params,
            retry: config.retry,
            live,
            cassette: Arc::new(Mutex::new(cassette)),
            cassette_path: config.cassette,
            counters: UsageCounters::default(),
        })
    }

    /// Replay gateway over an in-memory cassette.
    pub fn with_cassette(cassette: Cassette, model_id: impl Into<String>) -> Self {
        Self {
            backend: Backend::Replay,
            model_id: model_id.into(),
            params: CompletionParams::default(),
            retry: RetryPolicy::default(),
            live: None,
            cassette: Arc::new(Mutex::new(cassette)),
            cassette_path: None,
            counters: UsageCounters::default(),
        }
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn params(&self) -> CompletionParams {
        self.params
    }

    pub fn digest(&self, bundle: &PromptBundle, params: &CompletionParams) -> String {
        request_digest(bundle, params, &self.model_id)
    }

    /// Completions served so far and their summed usage.
    pub fn totals(&self) -> (u64, Usage) {
        (
            self.counters.completions.load(Ordering::SeqCst),
            Usage::new(
                self.counters.input_tokens.load(Ordering::SeqCst),
                self.counters.output_tokens.load(Ordering::SeqCst),
            ),
        )
    }

    pub async fn complete(&self, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        self.complete_with(bundle, &self.params).await
    }

    pub async fn complete_with(
        &self,
        bundle: &PromptBundle,
        params: &CompletionParams,
    ) -> Result<ModelResponse, GatewayError> {
        let digest = self.digest(bundle, params);
        let response = match self.backend {
            Backend::Replay => self
                .cassette
                .lock()
                .await
                .get(&digest)
                .cloned()
                .ok_or(GatewayError::CacheMiss { digest })?,
            Backend::Live => self.call_live(bundle, params).await?,
            Backend::Record => {
                let response = self.call_live(bundle, params).await?;
                let mut cassette = self.cassette.lock().await;
                cassette.upsert(CassetteEntry {
                    request_digest: digest,
                    response: response.clone(),
                });
                if let Some(path) = &self.cassette_path {
                    cassette.save(path)?;
                }
                response
            }
        };
        self.counters.completions.fetch_add(1, Ordering::SeqCst);
        self.counters
            .input_tokens
            .fetch_add(response.usage.input_tokens, Ordering::SeqCst);
        self.counters
            .output_tokens
            .fetch_add(response.usage.output_tokens, Ordering::SeqCst);
        Ok(response)
    }

    async fn call_live(
        &self,
        bundle: &PromptBundle,
        params: &CompletionParams,
    ) -> Result<ModelResponse, GatewayError> {
        let live = self
            .live
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no live client configured".into()))?;
        let request = ChatRequest {
            model: &self.model_id,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &bundle.system,
                },
                ChatMessage {
                    role: "user",
                    content: &bundle.user,
                },
            ],
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
        };

        let attempts = self.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                tokio::time::sleep(self.retry.backoff(attempt - 1)).await;
            }
            let started = Instant::now();
            let sent = live
                .http
                .post(&live.endpoint)
                .bearer_auth(&live.api_key)
                .json(&request)
                .send()
                .await;
            let response = match sent {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            let body = match response.text().await {
                Ok(b) => b,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            if status.as_u16() == 429 || status.is_server_error() {
                last_error = format!("HTTP {}: {}", status.as_u16(), provider_message(&body));
                continue;
            }
            if !status.is_success() {
                return Err(GatewayError::Provider {
                    status: status.as_u16(),
                    message: provider_message(&body),
                });
            }
            let parsed: ChatResponse =
                serde_json::from_str(&body).map_err(|e| GatewayError::Provider {
                    status: status.as_u16(),
                    message: format!("malformed completion: {e}"),
                })?;
            let text = parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .unwrap_or_default();
            if text.is_empty() {
                return Err(GatewayError::EmptyCompletion);
            }
            let usage = parsed
                .usage
                .map(|u| Usage::new(u.prompt_tokens, u.completion_tokens))
                .unwrap_or_default();
            return Ok(ModelResponse {
                text,
                usage,
                model_id: parsed.model.unwrap_or_else(|| self.model_id.clone()),
                latency_ms: started.elapsed().as_millis() as u64,
            });
        }
        Err(GatewayError::Transport {
            attempts,
            message: last_error,
        })
    }
}

fn provider_message(body: &str) -> String {
    serde_json::from_str::<ErrorEnvelope>(body)
        .map(|e| e.error.message)
        .unwrap_or_else(|_| body.chars().take(500).collect())
}
