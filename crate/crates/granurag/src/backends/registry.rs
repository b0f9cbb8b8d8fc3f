//! Backend configuration file and the registry of instantiated backends.
//!
//! The config file is a JSON object with a `backends` map from id to a
//! provider kind plus shared connection settings:
//!
//! ```json
//! {
//!   "backends": {
//!     "matcher": { "provider": "openai_chat", "model": "qwen-vl-max",
//!                  "endpoint": "https://…/chat/completions",
//!                  "credential_env": "DASHSCOPE_API_KEY" },
//!     "detector": { "provider": "mock_detector",
//!                   "by_image": { "a1.png": [ { "bbox": [0,0,32,32],
//!                     "confidence": 0.9, "label": "column" } ] } }
//!   }
//! }
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mock::{MockChatSpec, MockDetectorSpec, MockEmbeddingSpec};
use super::{
    BackendConfig, BackendError, ChatBackend, DetectorBackend, EmbeddingBackend,
    MockChatBackend, MockDetectorBackend, MockEmbeddingBackend, RetryPolicy,
};

/// Provider kind plus its provider-specific settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum ProviderKind {
    OpenaiChat { model: String },
    AnthropicChat { model: String },
    OpenaiEmbedding { model: String },
    YoloWorld,
    GroundingDino,
    MockChat(MockChatSpec),
    MockDetector(MockDetectorSpec),
    MockEmbedding(MockEmbeddingSpec),
}

/// One configured backend: provider kind plus shared connection settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendSpec {
    #[serde(flatten)]
    pub provider: ProviderKind,
    #[serde(flatten)]
    pub config: BackendConfig,
}

/// Top-level backend config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackendsFile {
    pub backends: BTreeMap<String, BackendSpec>,
}

/// Instantiated backends addressable by id, with per-id retry policies.
#[derive(Default)]
pub struct BackendRegistry {
    chats: BTreeMap<String, Arc<dyn ChatBackend>>,
    detectors: BTreeMap<String, Arc<dyn DetectorBackend>>,
    embedders: BTreeMap<String, Arc<dyn EmbeddingBackend>>,
    policies: BTreeMap<String, RetryPolicy>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a config file and instantiates every backend in it.
    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, BackendError> {
        let file: BackendsFile = serde_json::from_slice(bytes)
            .map_err(|e| BackendError::permanent("registry", format!("config parse: {e}")))?;
        Self::from_backends_file(&file)
    }

    pub fn from_backends_file(file: &BackendsFile) -> Result<Self, BackendError> {
        let mut registry = BackendRegistry::new();
        for (id, spec) in &file.backends {
            spec.config
                .validate()
                .map_err(|e| BackendError::permanent("registry", format!("backend {id}: {e}")))?;
            let policy = spec.config.retry_policy();
            match &spec.provider {
                ProviderKind::MockChat(mock) => {
                    registry.register_chat(
                        Arc::new(MockChatBackend::from_spec(id.clone(), mock.clone())),
                        policy,
                    );
                }
                ProviderKind::MockDetector(mock) => {
                    registry.register_detector(
                        Arc::new(MockDetectorBackend::from_spec(id.clone(), mock.clone())),
                        policy,
                    );
                }
                ProviderKind::MockEmbedding(mock) => {
                    registry.register_embedder(
                        Arc::new(MockEmbeddingBackend::from_spec(id.clone(), mock.clone())),
                        policy,
                    );
                }
                #[cfg(feature = "http")]
                ProviderKind::OpenaiChat { model } => {
                    registry.register_chat(
                        Arc::new(super::http::HttpChatBackend::new(
                            id.clone(),
                            super::http::ChatWire::OpenAiCompat,
                            model.clone(),
                            spec.config.clone(),
                        )),
                        policy,
                    );
                }
                #[cfg(feature = "http")]
                ProviderKind::AnthropicChat { model } => {
                    registry.register_chat(
                        Arc::new(super::http::HttpChatBackend::new(
                            id.clone(),
                            super::http::ChatWire::Anthropic,
                            model.clone(),
                            spec.config.clone(),
                        )),
                        policy,
                    );
                }
                #[cfg(feature = "http")]
                ProviderKind::OpenaiEmbedding { model } => {
                    registry.register_embedder(
                        Arc::new(super::http::HttpEmbeddingBackend::new(
                            id.clone(),
                            model.clone(),
                            spec.config.clone(),
                        )),
                        policy,
                    );
                }
                #[cfg(feature = "http")]
                ProviderKind::YoloWorld => {
                    registry.register_detector(
                        Arc::new(super::http::HttpDetectorBackend::new(
                            id.clone(),
                            super::http::DetectorWire::YoloWorld,
                            spec.config.clone(),
                        )),
                        policy,
                    );
                }
                #[cfg(feature = "http")]
                ProviderKind::GroundingDino => {
                    registry.register_detector(
                        Arc::new(super::http::HttpDetectorBackend::new(
                            id.clone(),
                            super::http::DetectorWire::GroundingDino,
                            spec.config.clone(),
                        )),
                        policy,
                    );
                }
                #[cfg(not(feature = "http"))]
                _ => {
                    return Err(BackendError::permanent(
                        "registry",
                        format!("backend {id} needs the `http` feature"),
                    ));
                }
            }
        }
        Ok(registry)
    }

    pub fn register_chat(&mut self, backend: Arc<dyn ChatBackend>, policy: RetryPolicy) {
        self.policies.insert(backend.id().to_string(), policy);
        self.chats.insert(backend.id().to_string(), backend);
    }

    pub fn register_detector(&mut self, backend: Arc<dyn DetectorBackend>, policy: RetryPolicy) {
        self.policies.insert(backend.id().to_string(), policy);
        self.detectors.insert(backend.id().to_string(), backend);
    }

    pub fn register_embedder(&mut self, backend: Arc<dyn EmbeddingBackend>, policy: RetryPolicy) {
        self.policies.insert(backend.id().to_string(), policy);
        self.embedders.insert(backend.id().to_string(), backend);
    }

    pub fn chat(&self, id: &str) -> Result<Arc<dyn ChatBackend>, BackendError> {
        self.chats.get(id).cloned().ok_or_else(|| {
            BackendError::permanent("registry", format!("no chat backend with id {id:?}"))
        })
    }

    pub fn detector(&self, id: &str) -> Result<Arc<dyn DetectorBackend>, BackendError> {
        self.detectors.get(id).cloned().ok_or_else(|| {
            BackendError::permanent("registry", format!("no detector backend with id {id:?}"))
        })
    }

    pub fn embedder(&self, id: &str) -> Result<Arc<dyn EmbeddingBackend>, BackendError> {
        self.embedders.get(id).cloned().ok_or_else(|| {
            BackendError::permanent("registry", format!("no embedding backend with id {id:?}"))
        })
    }

    pub fn policy(&self, id: &str) -> RetryPolicy {
        self.policies
            .get(id)
            .copied()
            .unwrap_or_else(RetryPolicy::none)
    }

    pub fn has_chat(&self, id: &str) -> bool {
        self.chats.contains_key(id)
    }

    pub fn has_detector(&self, id: &str) -> bool {
        self.detectors.contains_key(id)
    }

    pub fn has_embedder(&self, id: &str) -> bool {
        self.embedders.contains_key(id)
    }
}
