//! HTTP transport for provider-backed services (feature `http`).
//!
//! Credentials are resolved from the environment variable named in the
//! backend config at call time and travel only in request headers; they are
//! never logged, cached, or embedded in error messages.

use std::path::Path;
use std::time::Duration;

use serde_json::Value;

use super::adapters;
use super::{
    BackendConfig, BackendError, ChatBackend, ChatRequest, DetectorBackend, EmbedInput,
    EmbeddingBackend, RateLimiter, RawDetection,
};

/// Which chat wire format the endpoint speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChatWire {
    OpenAiCompat,
    Anthropic,
}

/// Which detector wire format the endpoint speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorWire {
    YoloWorld,
    GroundingDino,
}

pub struct HttpChatBackend {
    id: String,
    wire: ChatWire,
    model: String,
    config: BackendConfig,
    limiter: RateLimiter,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(id: impl Into<String>, wire: ChatWire, model: impl Into<String>, config: BackendConfig) -> Self {
        let agent = agent_for(&config);
        let limiter = RateLimiter::new(config.rate_limit);
        HttpChatBackend {
            id: id.into(),
            wire,
            model: model.into(),
            config,
            limiter,
            agent,
        }
    }
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat_complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = match self.wire {
            ChatWire::OpenAiCompat => adapters::openai::build_chat_body(&self.model, request),
            ChatWire::Anthropic => adapters::anthropic::build_chat_body(&self.model, request),
        };
        let _admission = self.limiter.acquire();
        let response = post_json(&self.agent, &self.id, &self.config, self.wire_headers(), &body)?;
        match self.wire {
            ChatWire::OpenAiCompat => adapters::openai::parse_chat_response(&self.id, &response),
            ChatWire::Anthropic => adapters::anthropic::parse_chat_response(&self.id, &response),
        }
    }
}

impl HttpChatBackend {
    fn wire_headers(&self) -> Vec<(&'static str, String)> {
        match self.wire {
            ChatWire::OpenAiCompat => Vec::new(),
            ChatWire::Anthropic => vec![("anthropic-version", "2023-06-01".to_string())],
        }
    }
}

pub struct HttpDetectorBackend {
    id: String,
    wire: DetectorWire,
    config: BackendConfig,
    limiter: RateLimiter,
    agent: ureq::Agent,
}

impl HttpDetectorBackend {
    pub fn new(id: impl Into<String>, wire: DetectorWire, config: BackendConfig) -> Self {
        let agent = agent_for(&config);
        let limiter = RateLimiter::new(config.rate_limit);
        HttpDetectorBackend {
            id: id.into(),
            wire,
            config,
            limiter,
            agent,
        }
    }
}

impl DetectorBackend for HttpDetectorBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect_objects(
        &self,
        image_path: &Path,
        vocabulary: &[String],
    ) -> Result<Vec<RawDetection>, BackendError> {
        let bytes = std::fs::read(image_path).map_err(|e| {
            BackendError::permanent(&self.id, format!("cannot read {}: {e}", image_path.display()))
        })?;
        let body = match self.wire {
            DetectorWire::YoloWorld => adapters::yolo_world::build_request_body(&bytes, vocabulary),
            DetectorWire::GroundingDino => {
                adapters::grounding_dino::build_request_body(&bytes, vocabulary)
            }
        };
        let _admission = self.limiter.acquire();
        let response = post_json(&self.agent, &self.id, &self.config, Vec::new(), &body)?;
        match self.wire {
            DetectorWire::YoloWorld => adapters::yolo_world::parse_response(&self.id, &response),
            DetectorWire::GroundingDino => {
                adapters::grounding_dino::parse_response(&self.id, &response)
            }
        }
    }
}

pub struct HttpEmbeddingBackend {
    id: String,
    model: String,
    config: BackendConfig,
    limiter: RateLimiter,
    agent: ureq::Agent,
}

impl HttpEmbeddingBackend {
    pub fn new(id: impl Into<String>, model: impl Into<String>, config: BackendConfig) -> Self {
        let agent = agent_for(&config);
        let limiter = RateLimiter::new(config.rate_limit);
        HttpEmbeddingBackend {
            id: id.into(),
            model: model.into(),
            config,
            limiter,
            agent,
        }
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<Vec<f32>>, BackendError> {
        // The OpenAI-compatible embeddings endpoint takes text only; image
        // inputs are sent as data URIs, which multimodal embedding services
        // accept in the same field.
        let items: Result<Vec<String>, BackendError> = inputs
            .iter()
            .map(|input| match input {
                EmbedInput::Text(t) => Ok(t.clone()),
                EmbedInput::ImagePath(p) => {
                    let bytes = std::fs::read(p).map_err(|e| {
                        BackendError::permanent(
                            &self.id,
                            format!("cannot read {}: {e}", p.display()),
                        )
                    })?;
                    Ok(format!(
                        "data:image/png;base64,{}",
                        adapters::base64_encode(&bytes)
                    ))
                }
                EmbedInput::ImageBytes { bytes, .. } => Ok(format!(
                    "data:image/png;base64,{}",
                    adapters::base64_encode(bytes)
                )),
            })
            .collect();
        let body = adapters::openai::build_embeddings_body(&self.model, &items?);
        let _admission = self.limiter.acquire();
        let response = post_json(&self.agent, &self.id, &self.config, Vec::new(), &body)?;
        adapters::openai::parse_embeddings_response(&self.id, &response)
    }
}

fn agent_for(config: &BackendConfig) -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(config.timeout_secs))
        .build()
}

/// POSTs a JSON body with auth headers, mapping HTTP status classes onto the
/// transient/permanent/credential failure taxonomy.
fn post_json(
    agent: &ureq::Agent,
    backend_id: &str,
    config: &BackendConfig,
    extra_headers: Vec<(&'static str, String)>,
    body: &Value,
) -> Result<Vec<u8>, BackendError> {
    let mut request = agent.post(&config.endpoint);
    if let Some(env_var) = &config.credential_env {
        let secret = std::env::var(env_var)
            .map_err(|_| BackendError::credential(backend_id, env_var))?;
        // Anthropic-style endpoints take x-api-key; everything else Bearer.
        if extra_headers.iter().any(|(k, _)| *k == "anthropic-version") {
            request = request.set("x-api-key", &secret);
        } else {
            request = request.set("Authorization", &format!("Bearer {secret}"));
        }
    }
    for (name, value) in &extra_headers {
        request = request.set(name, value);
    }
    match request.send_json(body) {
        Ok(response) => {
            let mut buf = Vec::new();
            response
                .into_reader()
                .read_to_end(&mut buf)
                .map_err(|e| BackendError::transient(backend_id, format!("read error: {e}")))?;
            Ok(buf)
        }
        Err(ureq::Error::Status(code, response)) => {
            let snippet = response
                .into_string()
                .unwrap_or_default()
                .chars()
                .take(300)
                .collect::<String>();
            let err = match code {
                401 | 403 => BackendError {
                    backend: backend_id.to_string(),
                    kind: super::FailureKind::Credential,
                    message: format!("HTTP {code} (credential rejected)"),
                },
                408 | 429 | 500..=599 => {
                    BackendError::transient(backend_id, format!("HTTP {code}: {snippet}"))
                }
                _ => BackendError::permanent(backend_id, format!("HTTP {code}: {snippet}")),
            };
            Err(err)
        }
        Err(ureq::Error::Transport(t)) => {
            Err(BackendError::transient(backend_id, format!("transport: {t}")))
        }
    }
}

use std::io::Read;
