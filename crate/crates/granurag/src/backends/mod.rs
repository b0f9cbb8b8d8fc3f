//! Uniform contracts for every external model service.
//!
//! The pipeline never sees provider wire formats: chat, detection, and
//! embedding services each sit behind one trait, with provider adapters
//! translating to and from the common contract. Deterministic mock
//! implementations ([`mock`]) make every stage testable offline, and a
//! content-addressed response cache ([`cache`]) makes repeated runs
//! bit-stable and cheap.

pub mod adapters;
pub mod cache;
#[cfg(feature = "http")]
pub mod http;
pub mod mock;
pub mod registry;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use mock::{MockChatBackend, MockDetectorBackend, MockEmbeddingBackend};
pub use registry::{BackendRegistry, BackendSpec, BackendsFile, ProviderKind};

/// Whether a failed call is worth retrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Rate limits, timeouts, 5xx: retried per the backend's policy.
    Transient,
    /// Malformed requests, unknown models, 4xx: never retried.
    Permanent,
    /// Missing or rejected credentials. The secret itself is never stored.
    Credential,
}

/// Failure reported by a backend, carrying its diagnostic message.
#[derive(Debug, Clone, Error)]
#[error("backend {backend} failed ({kind:?}): {message}")]
pub struct BackendError {
    pub backend: String,
    pub kind: FailureKind,
    pub message: String,
}

impl BackendError {
    pub fn transient(backend: impl Into<String>, message: impl Into<String>) -> Self {
        BackendError {
            backend: backend.into(),
            kind: FailureKind::Transient,
            message: message.into(),
        }
    }

    pub fn permanent(backend: impl Into<String>, message: impl Into<String>) -> Self {
        BackendError {
            backend: backend.into(),
            kind: FailureKind::Permanent,
            message: message.into(),
        }
    }

    /// Credential failures name the env var, never its value.
    pub fn credential(backend: impl Into<String>, env_var: &str) -> Self {
        BackendError {
            backend: backend.into(),
            kind: FailureKind::Credential,
            message: format!("credential env var {env_var} missing or rejected"),
        }
    }

    pub fn is_retryable(&self) -> bool {
        self.kind == FailureKind::Transient
    }
}

/// Connection and resilience settings shared by all providers.
///
/// Credentials are named by environment variable, never stored literally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    /// Name of the env var holding the API key, when the provider needs one.
    pub credential_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_initial_delay_ms: u64,
    pub retry_backoff_multiplier: f64,
    /// Maximum in-flight requests admitted concurrently.
    pub rate_limit: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: String::new(),
            credential_env: None,
            timeout_secs: 60,
            max_retries: 2,
            retry_initial_delay_ms: 250,
            retry_backoff_multiplier: 2.0,
            rate_limit: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.timeout_secs == 0 {
            return Err("timeout_secs must be > 0".into());
        }
        if self.rate_limit == 0 {
            return Err("rate_limit must be >= 1".into());
        }
        if self.retry_backoff_multiplier < 1.0 {
            return Err("retry_backoff_multiplier must be >= 1".into());
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_delay: Duration::from_millis(self.retry_initial_delay_ms),
            backoff_multiplier: self.retry_backoff_multiplier,
        }
    }
}

/// Decoding parameters forwarded to chat providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        // Low-temperature setup for stable, reproducible outputs.
        DecodingParams {
            temperature: 0.1,
            max_tokens: 600,
        }
    }
}

/// An image attachment in a chat request.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePart {
    /// Stable name used in audit logs and mock scripts.
    pub name: String,
    /// PNG or JPEG bytes.
    pub bytes: Vec<u8>,
}

/// Provider-independent chat completion request.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChatRequest {
    pub text_parts: Vec<String>,
    pub image_parts: Vec<ImagePart>,
    pub params: DecodingParams,
}

impl ChatRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        ChatRequest {
            text_parts: vec![prompt.into()],
            image_parts: Vec::new(),
            params: DecodingParams::default(),
        }
    }

    pub fn with_image(mut self, name: impl Into<String>, bytes: Vec<u8>) -> Self {
        self.image_parts.push(ImagePart {
            name: name.into(),
            bytes,
        });
        self
    }

    /// Concatenated text content, used by mocks for pattern matching and by
    /// audit logs.
    pub fn rendered_text(&self) -> String {
        let mut out = String::new();
        for part in &self.text_parts {
            out.push_str(part);
            out.push('\n');
        }
        for image in &self.image_parts {
            out.push_str(&format!("[image:{}]\n", image.name));
        }
        out
    }

    /// Canonical JSON for cache keys: images are content-hashed, object keys
    /// are sorted, whitespace is fixed, and decoding parameters participate.
    pub fn canonical_json(&self) -> String {
        let images: Vec<String> = self
            .image_parts
            .iter()
            .map(|p| sha256_hex(&p.bytes))
            .collect();
        serde_json::to_string(&serde_json::json!({
            "text_parts": self.text_parts,
            "image_sha256": images,
            "params": { "temperature": self.params.temperature, "max_tokens": self.params.max_tokens },
        }))
        .expect("canonical request serializes")
    }
}

/// Detector output before confidence cuts and bound clamping; coordinates
/// come back as provider-native floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub label: String,
}

/// Input to an embedding backend. Each call must be homogeneous in modality
/// (texts or images, never both).
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedInput {
    Text(String),
    ImagePath(std::path::PathBuf),
    /// In-memory image (e.g. a region crop). The name gives mocks a stable
    /// handle; cache keys use the content hash.
    ImageBytes { name: String, bytes: Vec<u8> },
}

impl EmbedInput {
    pub fn is_text(&self) -> bool {
        matches!(self, EmbedInput::Text(_))
    }

    /// Stable identity used for cache keys.
    pub fn cache_token(&self) -> String {
        match self {
            EmbedInput::Text(t) => format!("text:{t}"),
            EmbedInput::ImagePath(p) => match std::fs::read(p) {
                Ok(bytes) => format!("image-sha256:{}", sha256_hex(&bytes)),
                Err(_) => format!("image-path:{}", p.display()),
            },
            EmbedInput::ImageBytes { bytes, .. } => {
                format!("image-sha256:{}", sha256_hex(bytes))
            }
        }
    }
}

/// Multimodal chat completion service.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn chat_complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// Open-vocabulary object detection service.
pub trait DetectorBackend: Send + Sync {
    fn id(&self) -> &str;
    fn detect_objects(
        &self,
        image_path: &Path,
        vocabulary: &[String],
    ) -> Result<Vec<RawDetection>, BackendError>;
}

/// Text/image embedding service. One vector per input, order-preserving,
/// consistent dimension per backend.
pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<Vec<f32>>, BackendError>;
}

/// Retry schedule for transient failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    /// Additional attempts after the first.
    pub max_retries: u32,
    pub initial_delay: Duration,
    pub backoff_multiplier: f64,
}

impl RetryPolicy {
    /// No retries, no delays; used by tests and mocks.
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            initial_delay: Duration::ZERO,
            backoff_multiplier: 1.0,
        }
    }

    /// Immediate retries for deterministic tests.
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            initial_delay: Duration::ZERO,
            backoff_multiplier: 1.0,
        }
    }
}

/// Runs `attempt` up to `1 + max_retries` times, sleeping with exponential
/// backoff between tries. Only transient failures are retried.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    mut attempt: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut delay = policy.initial_delay;
    let mut tries = 0;
    loop {
        match attempt() {
            Ok(value) => return Ok(value),
            Err(err) if err.is_retryable() && tries < policy.max_retries => {
                tries += 1;
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                delay = Duration::from_secs_f64(delay.as_secs_f64() * policy.backoff_multiplier);
            }
            Err(err) => return Err(err),
        }
    }
}

/// Chat completion with retries and an optional response cache.
///
/// A cache hit performs zero backend calls. Stored entries are keyed by
/// (backend identity, canonicalized request), so semantically identical
/// requests hash equal and distinct decoding parameters hash differently.
pub fn chat_complete(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<String, BackendError> {
    let key = cache.map(|c| (c, c.key_for(backend.id(), &request.canonical_json())));
    if let Some((cache, key)) = &key {
        if let Some(hit) = cache.get(backend.id(), key) {
            return String::from_utf8(hit).map_err(|e| {
                BackendError::permanent(backend.id(), format!("cache entry not UTF-8: {e}"))
            });
        }
    }
    let response = with_retries(policy, || backend.chat_complete(request))?;
    if let Some((cache, key)) = &key {
        cache
            .put(backend.id(), key, response.as_bytes())
            .map_err(|e| {
                BackendError::permanent(backend.id(), format!("cache write failed: {e}"))
            })?;
    }
    Ok(response)
}

/// Detection with retries and an optional cache over (image content,
/// vocabulary).
pub fn detect_objects(
    backend: &dyn DetectorBackend,
    image_path: &Path,
    vocabulary: &[String],
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<Vec<RawDetection>, BackendError> {
    let key = cache.map(|c| {
        let image_token = match std::fs::read(image_path) {
            Ok(bytes) => sha256_hex(&bytes),
            Err(_) => image_path.display().to_string(),
        };
        let canonical = serde_json::to_string(&serde_json::json!({
            "image_sha256": image_token,
            "vocabulary": vocabulary,
        }))
        .expect("canonical detect request serializes");
        (c, c.key_for(backend.id(), &canonical))
    });
    if let Some((cache, key)) = &key {
        if let Some(hit) = cache.get(backend.id(), key) {
            return serde_json::from_slice(&hit).map_err(|e| {
                BackendError::permanent(backend.id(), format!("corrupt cache entry: {e}"))
            });
        }
    }
    let detections = with_retries(policy, || backend.detect_objects(image_path, vocabulary))?;
    if let Some((cache, key)) = &key {
        let bytes = serde_json::to_vec(&detections).expect("detections serialize");
        cache.put(backend.id(), key, &bytes).map_err(|e| {
            BackendError::permanent(backend.id(), format!("cache write failed: {e}"))
        })?;
    }
    Ok(detections)
}

/// Embedding with retries and an optional cache. Inputs must be homogeneous
/// in modality.
pub fn embed(
    backend: &dyn EmbeddingBackend,
    inputs: &[EmbedInput],
    policy: &RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<Vec<Vec<f32>>, BackendError> {
    let mixed = inputs.iter().any(EmbedInput::is_text) && inputs.iter().any(|i| !i.is_text());
    if mixed {
        return Err(BackendError::permanent(
            backend.id(),
            "embed inputs must be homogeneous in modality",
        ));
    }
    let key = cache.map(|c| {
        let tokens: Vec<String> = inputs.iter().map(EmbedInput::cache_token).collect();
        let canonical = serde_json::to_string(&serde_json::json!({ "inputs": tokens }))
            .expect("canonical embed request serializes");
        (c, c.key_for(backend.id(), &canonical))
    });
    if let Some((cache, key)) = &key {
        if let Some(hit) = cache.get(backend.id(), key) {
            return serde_json::from_slice(&hit).map_err(|e| {
                BackendError::permanent(backend.id(), format!("corrupt cache entry: {e}"))
            });
        }
    }
    let vectors = with_retries(policy, || backend.embed(inputs))?;
    if let Some((cache, key)) = &key {
        let bytes = serde_json::to_vec(&vectors).expect("vectors serialize");
        cache.put(backend.id(), key, &bytes).map_err(|e| {
            BackendError::permanent(backend.id(), format!("cache write failed: {e}"))
        })?;
    }
    Ok(vectors)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Blocking admission limiter: at most `limit` guards outstanding at once.
pub struct RateLimiter {
    limit: usize,
    state: Mutex<usize>,
    cond: Condvar,
}

impl RateLimiter {
    pub fn new(limit: usize) -> Self {
        RateLimiter {
            limit: limit.max(1),
            state: Mutex::new(0),
            cond: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> RateLimitGuard<'_> {
        let mut in_flight = self.state.lock().expect("rate limiter poisoned");
        while *in_flight >= self.limit {
            in_flight = self.cond.wait(in_flight).expect("rate limiter poisoned");
        }
        *in_flight += 1;
        RateLimitGuard { limiter: self }
    }
}

pub struct RateLimitGuard<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for RateLimitGuard<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.limiter.state.lock().expect("rate limiter poisoned");
        *in_flight -= 1;
        self.limiter.cond.notify_one();
    }
}

/// Per-role backend ids used by a pipeline run. Judges and the embedder are
/// optional: reference-based metrics are skipped when they are absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub detector: String,
    pub matcher: String,
    pub generator: String,
    #[serde(default)]
    pub judges: Vec<String>,
    #[serde(default)]
    pub embedder: Option<String>,
}

/// One entry of a backend config file: provider kind plus shared settings.
pub type BackendConfigMap = BTreeMap<String, BackendConfig>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_is_key_order_independent() {
        // Two JSON spellings of the same request content.
        let a: serde_json::Value =
            serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": 3}}"#).unwrap();
        let b: serde_json::Value =
            serde_json::from_str(r#"{ "a": {"x": 3,"y": 2},  "b": 1 }"#).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn decoding_params_change_the_cache_key() {
        let mut req = ChatRequest::text("describe the pediment");
        let key_a = req.canonical_json();
        req.params.temperature = 0.7;
        let key_b = req.canonical_json();
        assert_ne!(key_a, key_b);
    }

    #[test]
    fn retry_stops_on_permanent_failure() {
        let mut calls = 0;
        let result: Result<(), _> = with_retries(&RetryPolicy::immediate(5), || {
            calls += 1;
            Err(BackendError::permanent("b", "bad request"))
        });
        assert!(result.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn retry_recovers_from_transient_failures() {
        let mut calls = 0;
        let result = with_retries(&RetryPolicy::immediate(3), || {
            calls += 1;
            if calls < 3 {
                Err(BackendError::transient("b", "rate limited"))
            } else {
                Ok(42)
            }
        });
        assert_eq!(result.unwrap(), 42);
        assert_eq!(calls, 3);
    }

    #[test]
    fn rate_limiter_caps_in_flight() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let limiter = Arc::new(RateLimiter::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let limiter = Arc::clone(&limiter);
                let peak = Arc::clone(&peak);
                let current = Arc::clone(&current);
                scope.spawn(move || {
                    let _guard = limiter.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
