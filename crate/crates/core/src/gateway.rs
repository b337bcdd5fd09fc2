//! Provider contract for text generation and embedding.
//!
//! Two generation providers ship with the crate: [`ScriptedProvider`], a
//! pure function of `(prompt, seed)` driven by a fixture file, and
//! [`LiveProvider`], an OpenAI-compatible HTTPS client. Embeddings come
//! from [`HashingEmbedder`] offline or from the live provider.

use std::fs;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider refused: {0}")]
    Refused(String),
    #[error("cannot decode provider response: {0}")]
    Decode(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("provider configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: 2048,
            want_logprobs: true,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    /// Arithmetic mean of per-token natural-log probabilities; `None` when
    /// the provider cannot report them.
    pub mean_token_logprob: Option<f64>,
    pub token_count: usize,
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError>;
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    /// Returns a unit-norm vector of length [`Embedder::dimension`].
    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError>;
}

impl<T: TextGenerator + ?Sized> TextGenerator for &T {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        (**self).generate(request)
    }
}

impl<T: TextGenerator + ?Sized> TextGenerator for std::sync::Arc<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        (**self).generate(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        (**self).embed(text)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        (**self).embed(text)
    }
}

/// Scales `v` to unit L2 norm in place. Returns false for the zero vector.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

// ---------------------------------------------------------------------------
// Scripted provider

pub const SCRIPTED_FALLBACK_TEXT: &str = "UNKNOWN";
pub const SCRIPTED_FALLBACK_LOGPROB: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedResponse {
    pub text: String,
    #[serde(default)]
    pub logprob: Option<f64>,
}

impl CannedResponse {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        CannedResponse {
            text: text.into(),
            logprob: Some(logprob),
        }
    }
}

/// One fixture rule. Exactly one of `exact` or `contains` should be set;
/// `contains` matches when every listed fragment occurs in the prompt.
/// With several responses, the request seed picks `responses[seed % len]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub responses: Vec<CannedResponse>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptFixture {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

impl ScriptFixture {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let fixture: ScriptFixture =
            serde_json::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        for (i, rule) in fixture.rules.iter().enumerate() {
            if rule.responses.is_empty() {
                return Err(GatewayError::Config(format!("rule {i} has no responses")));
            }
            if rule.exact.is_none() && rule.contains.is_empty() {
                return Err(GatewayError::Config(format!("rule {i} has no matcher")));
            }
        }
        Ok(fixture)
    }
}

/// Deterministic generator: exact-prompt rules are consulted first, then
/// `contains` rules in declaration order. Unmatched prompts yield
/// [`SCRIPTED_FALLBACK_TEXT`] at [`SCRIPTED_FALLBACK_LOGPROB`].
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    rules: Vec<ScriptRule>,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fixture(fixture: ScriptFixture) -> Self {
        ScriptedProvider {
            rules: fixture.rules,
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::from_fixture(ScriptFixture::parse(&text)?))
    }

    pub fn exact(mut self, prompt: impl Into<String>, text: impl Into<String>, logprob: f64) -> Self {
        self.rules.push(ScriptRule {
            exact: Some(prompt.into()),
            contains: Vec::new(),
            responses: vec![CannedResponse::new(text, logprob)],
        });
        self
    }

    pub fn when_contains<I, S>(mut self, fragments: I, responses: Vec<CannedResponse>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.rules.push(ScriptRule {
            exact: None,
            contains: fragments.into_iter().map(Into::into).collect(),
            responses,
        });
        self
    }

    pub fn push_rule(&mut self, rule: ScriptRule) {
        self.rules.push(rule);
    }

    fn lookup(&self, prompt: &str) -> Option<&ScriptRule> {
        self.rules
            .iter()
            .find(|r| r.exact.as_deref() == Some(prompt))
            .or_else(|| {
                self.rules.iter().find(|r| {
                    r.exact.is_none()
                        && !r.contains.is_empty()
                        && r.contains.iter().all(|c| prompt.contains(c.as_str()))
                })
            })
    }
}

impl TextGenerator for ScriptedProvider {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        request.validate()?;
        let (text, logprob) = match self.lookup(&request.prompt) {
            Some(rule) => {
                let idx = (request.seed.unwrap_or(0) % rule.responses.len() as u64) as usize;
                let r = &rule.responses[idx];
                (r.text.clone(), r.logprob)
            }
            None => (
                SCRIPTED_FALLBACK_TEXT.to_string(),
                Some(SCRIPTED_FALLBACK_LOGPROB),
            ),
        };
        Ok(GenerationResult {
            token_count: text.split_whitespace().count(),
            mean_token_logprob: if request.want_logprobs {
                logprob.map(|l| l.min(0.0))
            } else {
                None
            },
            text,
        })
    }
}

// ---------------------------------------------------------------------------
// Hashing embedder

pub const HASHING_DIMENSION: usize = 256;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Signed bag-of-words hashing into a fixed number of buckets, then L2
/// normalization. Stable across platforms and releases.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dimension: HASHING_DIMENSION,
        }
    }
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingEmbedder { dimension }
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let mut v = vec![0f32; self.dimension];
        let dim = self.dimension as u64;
        let add = |v: &mut [f32], token: &str| {
            let h = fnv1a(token.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % dim) as usize] += sign;
        };
        let mut any = false;
        for token in tokenize(trimmed) {
            add(&mut v, &token);
            any = true;
        }
        if !any {
            add(&mut v, trimmed);
        }
        if !normalize(&mut v) {
            // All token contributions cancelled; fall back to the whole string.
            add(&mut v, trimmed);
            normalize(&mut v);
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Retry and throttling

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, returns a non-retryable error, or the
    /// attempt budget is spent. Backoff doubles after each failure.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let mut delay = self.initial_backoff;
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    tracing::warn!(attempt, error = %e, "retrying provider call");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Caps the number of in-flight calls to the wrapped provider.
pub struct Throttled<P> {
    inner: P,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<P> Throttled<P> {
    pub fn new(inner: P, limit: usize) -> Self {
        Throttled {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn with_permit<T>(&self, f: impl FnOnce(&P) -> T) -> T {
        {
            let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
            }
            *n += 1;
        }
        let out = f(&self.inner);
        let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.freed.notify_one();
        out
    }
}

impl<P: TextGenerator> TextGenerator for Throttled<P> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        self.with_permit(|p| p.generate(request))
    }
}

impl<P: Embedder> Embedder for Throttled<P> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        self.with_permit(|p| p.embed(text))
    }
}

// ---------------------------------------------------------------------------
// Live provider

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveProviderConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub embedding_dimension: usize,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LiveProviderConfig {
    fn default() -> Self {
        LiveProviderConfig {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4.1".into(),
            embedding_model: "text-embedding-3-small".into(),
            embedding_dimension: 1536,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

/// OpenAI-compatible chat-completion and embedding client.
pub struct LiveProvider {
    config: LiveProviderConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl LiveProvider {
    pub fn from_env(config: LiveProviderConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::Config(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(LiveProvider {
            config,
            api_key,
            client,
            retry: RetryPolicy::default(),
        })
    }

    fn post(&self, endpoint: &str, body: &Value) -> Result<String, GatewayError> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), endpoint);
        self.retry.run(|| {
            let resp = self
                .client
                .post(&url)
                .bearer_auth(&self.api_key)
                .json(body)
                .send()
                .map_err(|e| GatewayError::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp
                .text()
                .map_err(|e| GatewayError::Transport(e.to_string()))?;
            classify_status(status.as_u16(), text)
        })
    }
}

fn classify_status(status: u16, body: String) -> Result<String, GatewayError> {
    match status {
        200..=299 => Ok(body),
        408 | 429 | 500..=599 => Err(GatewayError::Transport(format!("HTTP {status}: {body}"))),
        _ => Err(GatewayError::Refused(format!("HTTP {status}: {body}"))),
    }
}

impl TextGenerator for LiveProvider {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        request.validate()?;
        let mut body = json!({
            "model": self.config.chat_model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "logprobs": request.want_logprobs,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let text = self.post("chat/completions", &body)?;
        decode_chat_completion(&text)
    }
}

impl Embedder for LiveProvider {
    fn dimension(&self) -> usize {
        self.config.embedding_dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let body = json!({"model": self.config.embedding_model, "input": text});
        let resp = self.post("embeddings", &body)?;
        let v = decode_embedding(&resp)?;
        if v.len() != self.config.embedding_dimension {
            return Err(GatewayError::Decode(format!(
                "expected dimension {}, got {}",
                self.config.embedding_dimension,
                v.len()
            )));
        }
        Ok(v)
    }
}

/// Decodes an OpenAI-style chat completion body.
pub fn decode_chat_completion(body: &str) -> Result<GenerationResult, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Decode(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Decode("missing choices[0]".into()))?;
    let message = choice
        .get("message")
        .ok_or_else(|| GatewayError::Decode("missing message".into()))?;
    if let Some(refusal) = message.get("refusal").and_then(Value::as_str) {
        return Err(GatewayError::Refused(refusal.to_string()));
    }
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Err(GatewayError::Refused("content filtered".into()));
    }
    let text = message
        .get("content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Decode("missing message.content".into()))?
        .to_string();
    let logprobs: Vec<f64> = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .map(|tokens| {
            tokens
                .iter()
                .filter_map(|t| t.get("logprob").and_then(Value::as_f64))
                .filter(|l| l.is_finite())
                .collect()
        })
        .unwrap_or_default();
    let mean = if logprobs.is_empty() {
        None
    } else {
        Some((logprobs.iter().sum::<f64>() / logprobs.len() as f64).min(0.0))
    };
    let token_count = if logprobs.is_empty() {
        v.pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .map(|n| n as usize)
            .unwrap_or_else(|| text.split_whitespace().count())
    } else {
        logprobs.len()
    };
    Ok(GenerationResult {
        text,
        mean_token_logprob: mean,
        token_count,
    })
}

/// Decodes an OpenAI-style embedding body and normalizes the vector.
pub fn decode_embedding(body: &str) -> Result<Vec<f32>, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Decode(e.to_string()))?;
    let arr = v
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Decode("missing data[0].embedding".into()))?;
    let mut out = Vec::with_capacity(arr.len());
    for x in arr {
        let f = x
            .as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| GatewayError::Decode("non-numeric embedding component".into()))?;
        out.push(f as f32);
    }
    if out.is_empty() || !normalize(&mut out) {
        return Err(GatewayError::Decode("degenerate embedding".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn scripted_echo() {
        let p = ScriptedProvider::new().exact("P", "yes", -0.1);
        let out = p.generate(&GenerationRequest::new("P")).unwrap();
        assert_eq!(out.text, "yes");
        assert_eq!(out.mean_token_logprob, Some(-0.1));
    }

    #[test]
    fn scripted_fallback() {
        let p = ScriptedProvider::new();
        let out = p.generate(&GenerationRequest::new("anything")).unwrap();
        assert_eq!(out.text, "UNKNOWN");
        assert_eq!(out.mean_token_logprob, Some(-2.0));
    }

    #[test]
    fn zero_output_tokens_is_rejected() {
        let p = ScriptedProvider::new();
        let mut req = GenerationRequest::new("P");
        req.max_output_tokens = 0;
        assert!(matches!(p.generate(&req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn seed_selects_response() {
        let p = ScriptedProvider::new().when_contains(
            ["backbone"],
            vec![CannedResponse::new("a", -0.1), CannedResponse::new("b", -0.2)],
        );
        let r = |s| p.generate(&GenerationRequest::new("the backbone?").with_seed(s)).unwrap().text;
        assert_eq!(r(0), "a");
        assert_eq!(r(1), "b");
        assert_eq!(r(2), "a");
        assert_eq!(r(1), r(1));
    }

    #[test]
    fn exact_rules_win_over_contains() {
        let p = ScriptedProvider::new()
            .when_contains(["P"], vec![CannedResponse::new("contains", -0.5)])
            .exact("P", "exact", -0.1);
        assert_eq!(p.generate(&GenerationRequest::new("P")).unwrap().text, "exact");
        assert_eq!(p.generate(&GenerationRequest::new("xPx")).unwrap().text, "contains");
    }

    #[test]
    fn fixture_file_parses() {
        let text = r#"{"rules":[{"exact":"P","responses":[{"text":"yes","logprob":-0.1}]},
                       {"contains":["a","b"],"responses":[{"text":"ab"}]}]}"#;
        let p = ScriptedProvider::from_fixture(ScriptFixture::parse(text).unwrap());
        assert_eq!(p.generate(&GenerationRequest::new("P")).unwrap().text, "yes");
        let ab = p.generate(&GenerationRequest::new("b then a")).unwrap();
        assert_eq!(ab.text, "ab");
        assert_eq!(ab.mean_token_logprob, None);
        assert!(ScriptFixture::parse(r#"{"rules":[{"exact":"P","responses":[]}]}"#).is_err());
        assert!(ScriptFixture::parse(r#"{"rules":[{"responses":[{"text":"x"}]}]}"#).is_err());
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("a").unwrap();
        assert_eq!(a, e.embed("a").unwrap());
        assert_eq!(a.len(), 256);
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let punct = e.embed("!!!").unwrap();
        let norm: f64 = punct.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        let e = HashingEmbedder::default();
        let q = e.embed("[MODALITY] SAR").unwrap();
        let near = cosine(&q, &e.embed("[MODALITY] SAR flood").unwrap());
        let far = cosine(&q, &e.embed("[BACKBONE] ViT").unwrap());
        assert!(near > far, "{near} <= {far}");
    }

    #[test]
    fn empty_text_cannot_be_embedded() {
        assert_eq!(HashingEmbedder::default().embed(""), Err(GatewayError::EmptyText));
        assert_eq!(HashingEmbedder::default().embed("   "), Err(GatewayError::EmptyText));
    }

    #[test]
    fn retry_gives_up_after_three_transport_failures() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        };
        let out: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(GatewayError::Transport("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn retry_does_not_repeat_refusals() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        };
        let out: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(GatewayError::Refused("no".into()))
        });
        assert!(matches!(out, Err(GatewayError::Refused(_))));
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn retry_recovers() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        };
        let out = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(GatewayError::Transport("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out, Ok(7));
    }

    #[test]
    fn status_classification() {
        assert!(classify_status(200, "ok".into()).is_ok());
        assert!(matches!(classify_status(503, String::new()), Err(GatewayError::Transport(_))));
        assert!(matches!(classify_status(429, String::new()), Err(GatewayError::Transport(_))));
        assert!(matches!(classify_status(400, String::new()), Err(GatewayError::Refused(_))));
    }

    #[test]
    fn chat_completion_mean_logprob() {
        let body = r#"{"choices":[{"message":{"content":"hi there"},"finish_reason":"stop",
            "logprobs":{"content":[{"token":"hi","logprob":-0.2},{"token":" there","logprob":-0.4}]}}]}"#;
        let r = decode_chat_completion(body).unwrap();
        assert_eq!(r.text, "hi there");
        assert!((r.mean_token_logprob.unwrap() + 0.3).abs() < 1e-12);
        assert_eq!(r.token_count, 2);
    }

    #[test]
    fn chat_completion_refusal() {
        let body = r#"{"choices":[{"message":{"content":null,"refusal":"cannot help"}}]}"#;
        assert!(matches!(decode_chat_completion(body), Err(GatewayError::Refused(_))));
    }

    #[test]
    fn embedding_decode_normalizes() {
        let v = decode_embedding(r#"{"data":[{"embedding":[3.0,4.0]}]}"#).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
        assert!(decode_embedding(r#"{"data":[{"embedding":[0.0]}]}"#).is_err());
    }

    #[test]
    fn throttle_passes_calls_through() {
        let p = Throttled::new(ScriptedProvider::new().exact("P", "yes", -0.1), 1);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| assert_eq!(p.generate(&GenerationRequest::new("P")).unwrap().text, "yes"));
            }
        });
    }
}
