//! Live HTTP transport speaking an OpenAI-compatible wire format.
//!
//! Chat-vision backends get a `chat/completions`-shaped POST with images
//! inlined as base64 data URLs; text-to-image backends get an image
//! generation POST and must answer with `b64_json` data.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use std::time::Duration;

use super::{BackendConfig, BackendKind, ModelRequest, RawReply, Transport, TransportError};

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(config: &BackendConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        HttpTransport { agent }
    }

    fn credential(config: &BackendConfig) -> Result<Option<String>, TransportError> {
        if config.credential_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&config.credential_env) {
            Ok(v) if !v.is_empty() => Ok(Some(v)),
            _ => Err(TransportError::Credential(config.credential_env.clone())),
        }
    }

    fn chat_body(config: &BackendConfig, request: &ModelRequest) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": request.user_text})];
        for image in &request.images {
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", B64.encode(image))},
            }));
        }
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.system_text}));
        }
        messages.push(serde_json::json!({"role": "user", "content": content}));
        serde_json::json!({"model": config.id.as_str(), "messages": messages})
    }

    fn send(
        &self,
        config: &BackendConfig,
        body: serde_json::Value,
    ) -> Result<serde_json::Value, TransportError> {
        let mut call = self
            .agent
            .post(&config.endpoint)
            .set("content-type", "application/json");
        if let Some(token) = Self::credential(config)? {
            call = call.set("authorization", &format!("Bearer {token}"));
        }
        match call.send_string(&body.to_string()) {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| TransportError::Fatal(format!("response is not JSON: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let detail = format!("HTTP {code}: {}", resp.into_string().unwrap_or_default());
                if code == 429 || code >= 500 {
                    Err(TransportError::Retryable(detail))
                } else {
                    Err(TransportError::Fatal(detail))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::Retryable(t.to_string())),
        }
    }
}

impl Transport for HttpTransport {
    fn execute(
        &self,
        config: &BackendConfig,
        request: &ModelRequest,
    ) -> Result<RawReply, TransportError> {
        match config.kind {
            BackendKind::ChatVision => {
                let json = self.send(config, Self::chat_body(config, request))?;
                let text = json["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| {
                        TransportError::Fatal("missing choices[0].message.content".into())
                    })?
                    .to_string();
                Ok(RawReply { text, image: None })
            }
            BackendKind::TextToImage => {
                let body = serde_json::json!({
                    "model": config.id.as_str(),
                    "prompt": request.user_text,
                    "response_format": "b64_json",
                });
                let json = self.send(config, body)?;
                let b64 = json["data"][0]["b64_json"]
                    .as_str()
                    .ok_or_else(|| TransportError::Fatal("missing data[0].b64_json".into()))?;
                let bytes = B64
                    .decode(b64)
                    .map_err(|e| TransportError::Fatal(format!("invalid base64 image: {e}")))?;
                Ok(RawReply {
                    text: String::new(),
                    image: Some(bytes),
                })
            }
        }
    }
}
