//! Uniform access to chat-vision and text-to-image backends.
//!
//! A [`Gateway`] owns one transport per configured backend and wraps every
//! call with the retry/rate-limit policy. The deterministic mock transport
//! makes the whole pipeline runnable (and testable) without a network.

pub mod http;
pub mod mock;
pub mod script;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

/// Identifier of one configured backend.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BackendId(pub String);

impl BackendId {
    pub fn new(id: impl Into<String>) -> Self {
        BackendId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for BackendId {
    fn from(s: &str) -> Self {
        BackendId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    ChatVision,
    TextToImage,
}

/// How the mock transport impersonates this backend. Only meaningful in
/// mock mode; live transports ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockProfile {
    /// Well-formed output for every stage; candidate answers are uniform
    /// random letters in the mandated bracket format.
    #[default]
    Standard,
    /// Candidate always answers `[[A]]`.
    AlwaysA,
    /// Candidate sometimes answers in free prose without the bracket
    /// format, forcing the judge path.
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: BackendId,
    pub kind: BackendKind,
    pub endpoint: String,
    /// Environment variable holding the credential for live calls.
    pub credential_env: String,
    #[serde(default)]
    pub max_retries: u32,
    #[serde(default)]
    pub min_interval_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub mock_profile: MockProfile,
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl BackendConfig {
    /// A config for a backend that only ever runs against the mock transport.
    pub fn mock(id: &str, kind: BackendKind) -> Self {
        BackendConfig {
            id: BackendId::new(id),
            kind,
            endpoint: format!("mock://{id}"),
            credential_env: String::new(),
            max_retries: 2,
            min_interval_ms: 0,
            timeout_ms: default_timeout_ms(),
            mock_profile: MockProfile::Standard,
        }
    }

    pub fn with_profile(mut self, profile: MockProfile) -> Self {
        self.mock_profile = profile;
        self
    }
}

/// Stage label carried by every request, used for transcript logging and
/// for the mock transport's template dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestTag {
    AspectGeneral,
    AspectFine,
    Description,
    AlignQuestions,
    AlignAnswer,
    ImageGen,
    Question,
    OptionAdjust,
    CandidateAnswer,
    Judge,
}

impl RequestTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            RequestTag::AspectGeneral => "aspect-general",
            RequestTag::AspectFine => "aspect-fine",
            RequestTag::Description => "description",
            RequestTag::AlignQuestions => "align-questions",
            RequestTag::AlignAnswer => "align-answer",
            RequestTag::ImageGen => "image-gen",
            RequestTag::Question => "question",
            RequestTag::OptionAdjust => "option-adjust",
            RequestTag::CandidateAnswer => "candidate-answer",
            RequestTag::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub system_text: String,
    pub user_text: String,
    /// Image payloads attached to the user turn. Must be empty for
    /// text-to-image requests.
    pub images: Vec<Vec<u8>>,
    pub tag: RequestTag,
}

impl ModelRequest {
    pub fn text(
        tag: RequestTag,
        system_text: impl Into<String>,
        user_text: impl Into<String>,
    ) -> Self {
        ModelRequest {
            system_text: system_text.into(),
            user_text: user_text.into(),
            images: Vec::new(),
            tag,
        }
    }

    pub fn with_image(mut self, image: Vec<u8>) -> Self {
        self.images.push(image);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ModelResponse {
    pub text: String,
    pub image: Option<Vec<u8>>,
    pub backend: BackendId,
    pub latency_ms: u64,
    pub attempts: u32,
}

/// The examiner pool: every generation duty draws a member uniformly at
/// random, keyed by a stable draw index so the selection survives resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExaminerPool {
    pub members: Vec<BackendId>,
    pub rng_seed: u64,
}

impl ExaminerPool {
    pub fn new(members: Vec<BackendId>, rng_seed: u64) -> Result<Self, GatewayError> {
        if members.is_empty() {
            return Err(GatewayError::EmptyPool);
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &members {
            if !seen.insert(m.clone()) {
                return Err(GatewayError::DuplicatePoolMember(m.clone()));
            }
        }
        Ok(ExaminerPool { members, rng_seed })
    }

    /// Uniform selection driven by (rng_seed, draw_index). Identical inputs
    /// give identical selections.
    pub fn pick(&self, draw_index: u64) -> &BackendId {
        let mut rng = seeds::derive_rng(self.rng_seed, &format!("examiner-draw/{draw_index}"));
        &self.members[rng.gen_range(0..self.members.len())]
    }
}

/// Raw payload returned by a transport before the gateway shapes it.
#[derive(Debug, Clone)]
pub struct RawReply {
    pub text: String,
    pub image: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    /// Transient transport or server failure (timeouts, 5xx, 429): eligible
    /// for retry.
    #[error("retryable: {0}")]
    Retryable(String),
    /// Anything the backend rejected outright (4xx other than 429,
    /// unusable response shape).
    #[error("rejected: {0}")]
    Fatal(String),
    /// The credential environment variable is unset.
    #[error("credential variable {0} missing")]
    Credential(String),
}

pub trait Transport: Send + Sync {
    fn execute(
        &self,
        config: &BackendConfig,
        request: &ModelRequest,
    ) -> Result<RawReply, TransportError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend {backend}: retries exhausted after {attempts} attempts: {last}")]
    ExhaustedRetries {
        backend: BackendId,
        attempts: u32,
        last: String,
    },
    #[error("backend {backend}: credential variable {var} not set")]
    CredentialMissing { backend: BackendId, var: String },
    #[error("backend {backend}: malformed payload: {detail}")]
    MalformedPayload { backend: BackendId, detail: String },
    #[error("backend {backend}: rejected request: {detail}")]
    Rejected { backend: BackendId, detail: String },
    #[error("unknown backend {0}")]
    UnknownBackend(BackendId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("empty prompt for image generation")]
    EmptyPrompt,
    #[error("examiner pool must not be empty")]
    EmptyPool,
    #[error("duplicate examiner pool member {0}")]
    DuplicatePoolMember(BackendId),
}

struct BackendEntry {
    config: BackendConfig,
    transport: Box<dyn Transport>,
    /// Completion instant of the last attempt, for the per-backend
    /// min-interval clock.
    last_attempt: Mutex<Option<Instant>>,
}

/// Shared, thread-safe front door to every configured backend.
pub struct Gateway {
    backends: BTreeMap<BackendId, BackendEntry>,
    transcript: Option<Mutex<File>>,
    backoff_base_ms: u64,
}

impl Gateway {
    /// Wire each config to an explicit transport. Used directly by tests;
    /// [`Gateway::mock`] and [`Gateway::live`] cover the common cases.
    pub fn with_transports(pairs: Vec<(BackendConfig, Box<dyn Transport>)>) -> Self {
        let mut backends = BTreeMap::new();
        for (config, transport) in pairs {
            backends.insert(
                config.id.clone(),
                BackendEntry {
                    config,
                    transport,
                    last_attempt: Mutex::new(None),
                },
            );
        }
        Gateway {
            backends,
            transcript: None,
            backoff_base_ms: 250,
        }
    }

    /// Every backend served by the seeded deterministic mock. The per-backend
    /// substream is derived from (seed, backend id) so distinct backends
    /// produce distinct content.
    pub fn mock(configs: Vec<BackendConfig>, seed: u64) -> Self {
        let pairs = configs
            .into_iter()
            .map(|config| {
                let backend_seed = seeds::derive_u64(seed, &format!("mock-backend/{}", config.id));
                let transport: Box<dyn Transport> =
                    Box::new(mock::MockTransport::new(backend_seed));
                (config, transport)
            })
            .collect();
        let mut gw = Self::with_transports(pairs);
        gw.backoff_base_ms = 0;
        gw
    }

    /// Every backend served over HTTP.
    pub fn live(configs: Vec<BackendConfig>) -> Self {
        let pairs = configs
            .into_iter()
            .map(|config| {
                let transport: Box<dyn Transport> = Box::new(http::HttpTransport::new(&config));
                (config, transport)
            })
            .collect();
        Self::with_transports(pairs)
    }

    /// Append one structured line per completed call to `path`.
    pub fn with_transcript(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.transcript = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn set_backoff_base_ms(&mut self, ms: u64) {
        self.backoff_base_ms = ms;
    }

    pub fn config(&self, backend: &BackendId) -> Option<&BackendConfig> {
        self.backends.get(backend).map(|e| &e.config)
    }

    /// Run one request against a backend, retrying transient failures with
    /// exponential backoff up to the backend's `max_retries`.
    pub fn complete(
        &self,
        backend: &BackendId,
        request: &ModelRequest,
    ) -> Result<ModelResponse, GatewayError> {
        let entry = self
            .backends
            .get(backend)
            .ok_or_else(|| GatewayError::UnknownBackend(backend.clone()))?;

        if request.user_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest(
                "user text must not be empty".into(),
            ));
        }
        if entry.config.kind == BackendKind::TextToImage && !request.images.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "image payloads are not allowed on text-to-image requests".into(),
            ));
        }

        let started = Instant::now();
        let max_attempts = entry.config.max_retries + 1;
        let mut last_failure = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.backoff_delay(attempt));
            }
            self.rate_gate(entry);
            match entry.transport.execute(&entry.config, request) {
                Ok(raw) => {
                    let response = self.shape(entry, raw, attempt, started)?;
                    self.log_call(entry, request, attempt, true, started);
                    return Ok(response);
                }
                Err(TransportError::Credential(var)) => {
                    self.log_call(entry, request, attempt, false, started);
                    return Err(GatewayError::CredentialMissing {
                        backend: backend.clone(),
                        var,
                    });
                }
                Err(TransportError::Fatal(detail)) => {
                    self.log_call(entry, request, attempt, false, started);
                    return Err(GatewayError::Rejected {
                        backend: backend.clone(),
                        detail,
                    });
                }
                Err(TransportError::Retryable(detail)) => {
                    last_failure = detail;
                }
            }
        }
        self.log_call(entry, request, max_attempts, false, started);
        Err(GatewayError::ExhaustedRetries {
            backend: backend.clone(),
            attempts: max_attempts,
            last: last_failure,
        })
    }

    /// Text-to-image call; returns decodable raster bytes.
    pub fn generate_image(
        &self,
        backend: &BackendId,
        prompt: &str,
    ) -> Result<Vec<u8>, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let entry = self
            .backends
            .get(backend)
            .ok_or_else(|| GatewayError::UnknownBackend(backend.clone()))?;
        if entry.config.kind != BackendKind::TextToImage {
            return Err(GatewayError::InvalidRequest(format!(
                "backend {backend} is not a text-to-image backend"
            )));
        }
        let request = ModelRequest::text(RequestTag::ImageGen, "", prompt);
        let response = self.complete(backend, &request)?;
        response
            .image
            .ok_or_else(|| GatewayError::MalformedPayload {
                backend: backend.clone(),
                detail: "image backend returned no image bytes".into(),
            })
    }

    fn shape(
        &self,
        entry: &BackendEntry,
        raw: RawReply,
        attempts: u32,
        started: Instant,
    ) -> Result<ModelResponse, GatewayError> {
        let backend = entry.config.id.clone();
        match entry.config.kind {
            BackendKind::ChatVision => {
                if raw.image.is_some() {
                    return Err(GatewayError::MalformedPayload {
                        backend,
                        detail: "chat backend returned an image payload".into(),
                    });
                }
                if raw.text.trim().is_empty() {
                    return Err(GatewayError::MalformedPayload {
                        backend,
                        detail: "chat backend returned empty text".into(),
                    });
                }
            }
            BackendKind::TextToImage => {
                if raw.image.is_none() {
                    return Err(GatewayError::MalformedPayload {
                        backend,
                        detail: "image backend returned no image".into(),
                    });
                }
            }
        }
        Ok(ModelResponse {
            text: raw.text,
            image: raw.image,
            backend: entry.config.id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            attempts,
        })
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        if self.backoff_base_ms == 0 {
            return Duration::ZERO;
        }
        let exp = self
            .backoff_base_ms
            .saturating_mul(1 << (attempt - 2).min(8));
        let jitter = rand::thread_rng().gen_range(0..=self.backoff_base_ms / 4 + 1);
        Duration::from_millis(exp + jitter)
    }

    /// Serialized per-backend clock: at least `min_interval_ms` between the
    /// completion of one attempt and the start of the next.
    fn rate_gate(&self, entry: &BackendEntry) {
        let min_interval = Duration::from_millis(entry.config.min_interval_ms);
        let mut last = entry.last_attempt.lock().expect("rate clock poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < min_interval {
                std::thread::sleep(min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn log_call(
        &self,
        entry: &BackendEntry,
        request: &ModelRequest,
        attempts: u32,
        ok: bool,
        started: Instant,
    ) {
        let Some(transcript) = &self.transcript else {
            return;
        };
        let record = serde_json::json!({
            "v": 1,
            "ts_ms": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            "backend": entry.config.id.as_str(),
            "tag": request.tag.as_str(),
            "attempts": attempts,
            "ok": ok,
            "latency_ms": started.elapsed().as_millis() as u64,
            "images": request.images.len(),
            "user_chars": request.user_text.len(),
        });
        if let Ok(mut file) = transcript.lock() {
            let _ = writeln!(file, "{record}");
        }
    }
}
