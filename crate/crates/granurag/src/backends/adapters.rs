//! Provider wire-format adapters.
//!
//! Each adapter translates between the common backend contract and one
//! provider's request/response payloads. The translation layer is pure, so
//! adapters are tested against recorded payload fixtures without network
//! access; the HTTP transport lives in [`super::http`].

use serde_json::{json, Value};

use super::{BackendError, ChatRequest, RawDetection};

/// Minimal base64 (standard alphabet, padded) for data-URI image payloads.
pub(crate) fn base64_encode(bytes: &[u8]) -> String {
    const ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [
            chunk[0],
            chunk.get(1).copied().unwrap_or(0),
            chunk.get(2).copied().unwrap_or(0),
        ];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        out.push(ALPHABET[(n >> 18) as usize & 63] as char);
        out.push(ALPHABET[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            ALPHABET[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            ALPHABET[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}

fn image_data_uri(bytes: &[u8]) -> String {
    // PNG magic, else assume JPEG; only these two formats flow through the
    // pipeline.
    let media = if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else {
        "image/jpeg"
    };
    format!("data:{media};base64,{}", base64_encode(bytes))
}

/// OpenAI-compatible chat/completions and embeddings payloads. Also covers
/// Qwen-style services exposing the compatible endpoint.
pub mod openai {
    use super::*;

    pub fn build_chat_body(model: &str, request: &ChatRequest) -> Value {
        let mut content: Vec<Value> = request
            .text_parts
            .iter()
            .map(|t| json!({ "type": "text", "text": t }))
            .collect();
        for image in &request.image_parts {
            content.push(json!({
                "type": "image_url",
                "image_url": { "url": super::image_data_uri(&image.bytes) },
            }));
        }
        json!({
            "model": model,
            "messages": [ { "role": "user", "content": content } ],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        })
    }

    pub fn parse_chat_response(backend: &str, body: &[u8]) -> Result<String, BackendError> {
        let value: Value = serde_json::from_slice(body)
            .map_err(|e| BackendError::permanent(backend, format!("invalid JSON response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                BackendError::permanent(backend, "response missing choices[0].message.content")
            })
    }

    pub fn build_embeddings_body(model: &str, inputs: &[String]) -> Value {
        json!({ "model": model, "input": inputs })
    }

    pub fn parse_embeddings_response(
        backend: &str,
        body: &[u8],
    ) -> Result<Vec<Vec<f32>>, BackendError> {
        let value: Value = serde_json::from_slice(body)
            .map_err(|e| BackendError::permanent(backend, format!("invalid JSON response: {e}")))?;
        let data = value["data"].as_array().ok_or_else(|| {
            BackendError::permanent(backend, "embeddings response missing data array")
        })?;
        data.iter()
            .map(|entry| {
                entry["embedding"]
                    .as_array()
                    .ok_or_else(|| {
                        BackendError::permanent(backend, "embeddings entry missing vector")
                    })
                    .map(|v| v.iter().filter_map(Value::as_f64).map(|f| f as f32).collect())
            })
            .collect()
    }
}

/// Anthropic messages payloads.
pub mod anthropic {
    use super::*;

    pub fn build_chat_body(model: &str, request: &ChatRequest) -> Value {
        let mut content: Vec<Value> = Vec::new();
        for image in &request.image_parts {
            let media = if image.bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
                "image/png"
            } else {
                "image/jpeg"
            };
            content.push(json!({
                "type": "image",
                "source": {
                    "type": "base64",
                    "media_type": media,
                    "data": super::base64_encode(&image.bytes),
                },
            }));
        }
        for text in &request.text_parts {
            content.push(json!({ "type": "text", "text": text }));
        }
        json!({
            "model": model,
            "max_tokens": request.params.max_tokens,
            "temperature": request.params.temperature,
            "messages": [ { "role": "user", "content": content } ],
        })
    }

    pub fn parse_chat_response(backend: &str, body: &[u8]) -> Result<String, BackendError> {
        let value: Value = serde_json::from_slice(body)
            .map_err(|e| BackendError::permanent(backend, format!("invalid JSON response: {e}")))?;
        let content = value["content"].as_array().ok_or_else(|| {
            BackendError::permanent(backend, "response missing content array")
        })?;
        let text: String = content
            .iter()
            .filter(|block| block["type"] == "text")
            .filter_map(|block| block["text"].as_str())
            .collect();
        if text.is_empty() {
            return Err(BackendError::permanent(backend, "response has no text blocks"));
        }
        Ok(text)
    }
}

/// Hosted YOLO-World endpoint payloads (replicate-style prediction API).
pub mod yolo_world {
    use super::*;

    /// The vocabulary is forwarded verbatim as `class_names`.
    pub fn build_request_body(image_bytes: &[u8], vocabulary: &[String]) -> Value {
        json!({
            "input": {
                "image": super::image_data_uri(image_bytes),
                "class_names": vocabulary,
            }
        })
    }

    /// Parses `{"output": [{"box": {"x1","y1","x2","y2"}, "confidence", "label"}]}`.
    pub fn parse_response(backend: &str, body: &[u8]) -> Result<Vec<RawDetection>, BackendError> {
        let value: Value = serde_json::from_slice(body)
            .map_err(|e| BackendError::permanent(backend, format!("invalid JSON response: {e}")))?;
        let output = value["output"].as_array().ok_or_else(|| {
            BackendError::permanent(backend, "detector response missing output array")
        })?;
        output
            .iter()
            .map(|det| {
                let coord = |k: &str| {
                    det["box"][k].as_f64().ok_or_else(|| {
                        BackendError::permanent(backend, format!("detection missing box.{k}"))
                    })
                };
                Ok(RawDetection {
                    bbox: [coord("x1")?, coord("y1")?, coord("x2")?, coord("y2")?],
                    confidence: det["confidence"].as_f64().unwrap_or(0.0),
                    label: det["label"].as_str().unwrap_or("").to_string(),
                })
            })
            .collect()
    }
}

/// Grounding DINO inference-server payloads.
pub mod grounding_dino {
    use super::*;

    /// The vocabulary is forwarded verbatim as `prompts`.
    pub fn build_request_body(image_bytes: &[u8], vocabulary: &[String]) -> Value {
        json!({
            "image": super::image_data_uri(image_bytes),
            "prompts": vocabulary,
        })
    }

    /// Parses parallel arrays `{"boxes": [[x0,y0,x1,y1]], "scores": [..], "phrases": [..]}`.
    pub fn parse_response(backend: &str, body: &[u8]) -> Result<Vec<RawDetection>, BackendError> {
        let value: Value = serde_json::from_slice(body)
            .map_err(|e| BackendError::permanent(backend, format!("invalid JSON response: {e}")))?;
        let boxes = value["boxes"].as_array().ok_or_else(|| {
            BackendError::permanent(backend, "detector response missing boxes array")
        })?;
        let scores = value["scores"].as_array().cloned().unwrap_or_default();
        let phrases = value["phrases"].as_array().cloned().unwrap_or_default();
        boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let coords: Vec<f64> = b
                    .as_array()
                    .map(|v| v.iter().filter_map(Value::as_f64).collect())
                    .unwrap_or_default();
                if coords.len() != 4 {
                    return Err(BackendError::permanent(
                        backend,
                        format!("box {i} does not have 4 coordinates"),
                    ));
                }
                Ok(RawDetection {
                    bbox: [coords[0], coords[1], coords[2], coords[3]],
                    confidence: scores.get(i).and_then(Value::as_f64).unwrap_or(0.0),
                    label: phrases
                        .get(i)
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .to_string(),
                })
            })
            .collect()
    }
}
