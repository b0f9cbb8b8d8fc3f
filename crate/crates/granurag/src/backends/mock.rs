//! Deterministic mock backends for offline runs and tests.
//!
//! Mock chat backends answer from a scripted (pattern, response) table
//! matched by substring against the rendered request; mock detectors map
//! image file names to fixed detection lists; mock embedders assign vectors
//! by token, falling back to a stable hash-derived unit vector. All mocks
//! count their invocations so tests can assert cache hits and resume
//! behavior issue zero duplicate calls.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendError, ChatBackend, ChatRequest, DetectorBackend, EmbedInput, EmbeddingBackend,
    RawDetection,
};

/// One scripted chat rule: the first rule whose pattern occurs in the
/// rendered request wins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    pub response: String,
}

/// Serializable description of a [`MockChatBackend`], used in backend config
/// files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockChatSpec {
    #[serde(default)]
    pub script: Vec<ScriptRule>,
    #[serde(default)]
    pub default_response: Option<String>,
    /// Fail this many leading calls with a transient error, then succeed.
    #[serde(default)]
    pub fail_first: usize,
}

pub struct MockChatBackend {
    id: String,
    spec: MockChatSpec,
    calls: AtomicUsize,
}

impl MockChatBackend {
    pub fn new(id: impl Into<String>) -> Self {
        MockChatBackend {
            id: id.into(),
            spec: MockChatSpec::default(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_spec(id: impl Into<String>, spec: MockChatSpec) -> Self {
        MockChatBackend {
            id: id.into(),
            spec,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn respond(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.spec.script.push(ScriptRule {
            pattern: pattern.into(),
            response: response.into(),
        });
        self
    }

    pub fn default_response(mut self, response: impl Into<String>) -> Self {
        self.spec.default_response = Some(response.into());
        self
    }

    pub fn fail_first(mut self, n: usize) -> Self {
        self.spec.fail_first = n;
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat_complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if call < self.spec.fail_first {
            return Err(BackendError::transient(
                &self.id,
                format!("scripted failure {} of {}", call + 1, self.spec.fail_first),
            ));
        }
        let rendered = request.rendered_text();
        for rule in &self.spec.script {
            if rendered.contains(&rule.pattern) {
                return Ok(rule.response.clone());
            }
        }
        match &self.spec.default_response {
            Some(response) => Ok(response.clone()),
            None => Err(BackendError::permanent(
                &self.id,
                "no scripted response matched the request",
            )),
        }
    }
}

/// Serializable description of a [`MockDetectorBackend`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockDetectorSpec {
    /// Detections keyed by image file name (not full path).
    #[serde(default)]
    pub by_image: BTreeMap<String, Vec<RawDetection>>,
    #[serde(default)]
    pub default: Vec<RawDetection>,
}

pub struct MockDetectorBackend {
    id: String,
    spec: MockDetectorSpec,
    calls: AtomicUsize,
}

impl MockDetectorBackend {
    pub fn new(id: impl Into<String>) -> Self {
        MockDetectorBackend {
            id: id.into(),
            spec: MockDetectorSpec::default(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_spec(id: impl Into<String>, spec: MockDetectorSpec) -> Self {
        MockDetectorBackend {
            id: id.into(),
            spec,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn detections_for(
        mut self,
        file_name: impl Into<String>,
        detections: Vec<RawDetection>,
    ) -> Self {
        self.spec.by_image.insert(file_name.into(), detections);
        self
    }

    pub fn default_detections(mut self, detections: Vec<RawDetection>) -> Self {
        self.spec.default = detections;
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl DetectorBackend for MockDetectorBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect_objects(
        &self,
        image_path: &Path,
        _vocabulary: &[String],
    ) -> Result<Vec<RawDetection>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let name = image_path
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        Ok(self
            .spec
            .by_image
            .get(&name)
            .cloned()
            .unwrap_or_else(|| self.spec.default.clone()))
    }
}

/// Serializable description of a [`MockEmbeddingBackend`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEmbeddingSpec {
    pub dimension: usize,
    /// Exact-token assignments: text inputs match their full text, image
    /// inputs match their file name.
    #[serde(default)]
    pub assignments: BTreeMap<String, Vec<f32>>,
}

impl Default for MockEmbeddingSpec {
    fn default() -> Self {
        MockEmbeddingSpec {
            dimension: 8,
            assignments: BTreeMap::new(),
        }
    }
}

pub struct MockEmbeddingBackend {
    id: String,
    spec: MockEmbeddingSpec,
    calls: AtomicUsize,
}

impl MockEmbeddingBackend {
    pub fn new(id: impl Into<String>, dimension: usize) -> Self {
        MockEmbeddingBackend {
            id: id.into(),
            spec: MockEmbeddingSpec {
                dimension,
                assignments: BTreeMap::new(),
            },
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_spec(id: impl Into<String>, spec: MockEmbeddingSpec) -> Self {
        MockEmbeddingBackend {
            id: id.into(),
            spec,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn assign(mut self, token: impl Into<String>, vector: Vec<f32>) -> Self {
        self.spec.assignments.insert(token.into(), vector);
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn token_of(input: &EmbedInput) -> String {
        match input {
            EmbedInput::Text(t) => t.clone(),
            EmbedInput::ImagePath(p) => p
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_else(|| p.display().to_string()),
            EmbedInput::ImageBytes { name, .. } => name.clone(),
        }
    }

    /// Stable pseudo-embedding: SHA-256 of the token expanded to the
    /// configured dimension and L2-normalized.
    fn hash_embedding(&self, token: &str) -> Vec<f32> {
        let mut values = Vec::with_capacity(self.spec.dimension);
        let mut counter: u32 = 0;
        while values.len() < self.spec.dimension {
            let mut hasher = Sha256::new();
            hasher.update(token.as_bytes());
            hasher.update(counter.to_le_bytes());
            let digest = hasher.finalize();
            for chunk in digest.chunks_exact(4) {
                if values.len() == self.spec.dimension {
                    break;
                }
                let raw = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                // Map to [-1, 1).
                values.push((raw as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32);
            }
            counter += 1;
        }
        let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v = (*v as f64 / norm) as f32;
            }
        }
        values
    }
}

impl EmbeddingBackend for MockEmbeddingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut out = Vec::with_capacity(inputs.len());
        for input in inputs {
            let token = Self::token_of(input);
            let vector = match self.spec.assignments.get(&token) {
                Some(v) => {
                    if v.len() != self.spec.dimension {
                        return Err(BackendError::permanent(
                            &self.id,
                            format!(
                                "assigned vector for {token:?} has dimension {}, backend is {}",
                                v.len(),
                                self.spec.dimension
                            ),
                        ));
                    }
                    v.clone()
                }
                None => self.hash_embedding(&token),
            };
            out.push(vector);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{chat_complete, RetryPolicy};

    #[test]
    fn scripted_rule_matches_by_substring() {
        let backend = MockChatBackend::new("matcher")
            .respond("twin towers", "twin towers")
            .default_response("NONE");
        let hit = backend
            .chat_complete(&ChatRequest::text("candidates: twin towers; windows"))
            .unwrap();
        assert_eq!(hit, "twin towers");
        let miss = backend
            .chat_complete(&ChatRequest::text("candidates: pediment"))
            .unwrap();
        assert_eq!(miss, "NONE");
        assert_eq!(backend.call_count(), 2);
    }

    #[test]
    fn fail_twice_then_succeed_under_retry() {
        let backend = MockChatBackend::new("flaky")
            .default_response("ok")
            .fail_first(2);
        let out = chat_complete(
            &backend,
            &ChatRequest::text("hi"),
            &RetryPolicy::immediate(3),
            None,
        )
        .unwrap();
        assert_eq!(out, "ok");
        assert_eq!(backend.call_count(), 3);
    }

    #[test]
    fn cache_hit_skips_backend_call() {
        let dir = tempfile::tempdir().unwrap();
        let cache = crate::backends::ResponseCache::open(dir.path()).unwrap();
        let backend = MockChatBackend::new("judge").default_response("coverage: 100");
        let request = ChatRequest::text("rate this");
        let first = chat_complete(&backend, &request, &RetryPolicy::none(), Some(&cache)).unwrap();
        let second = chat_complete(&backend, &request, &RetryPolicy::none(), Some(&cache)).unwrap();
        assert_eq!(first, second);
        assert_eq!(backend.call_count(), 1);
    }

    #[test]
    fn detector_maps_by_file_name() {
        let det = RawDetection {
            bbox: [1.0, 2.0, 30.0, 40.0],
            confidence: 0.9,
            label: "column".into(),
        };
        let backend =
            MockDetectorBackend::new("yolo-mock").detections_for("a1.png", vec![det.clone()]);
        let out = backend
            .detect_objects(Path::new("/tmp/run/images/a1.png"), &["column".into()])
            .unwrap();
        assert_eq!(out, vec![det]);
        let empty = backend
            .detect_objects(Path::new("/tmp/unknown.png"), &["column".into()])
            .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn embedder_is_order_preserving_and_stable() {
        let backend = MockEmbeddingBackend::new("clip-mock", 16)
            .assign("pediment", vec![1.0; 16]);
        let inputs = vec![
            EmbedInput::Text("pediment".into()),
            EmbedInput::Text("rose window".into()),
            EmbedInput::Text("rose window".into()),
        ];
        let vectors = backend.embed(&inputs).unwrap();
        assert_eq!(vectors.len(), 3);
        assert_eq!(vectors[0], vec![1.0; 16]);
        assert_eq!(vectors[1], vectors[2]);
        assert_eq!(vectors[1].len(), 16);
        // Hash-derived embeddings are unit length.
        let norm: f64 = vectors[1].iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
