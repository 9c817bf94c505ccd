//! Scripted transport for tests: replays a fixed sequence of replies and
//! failures, and records every request it saw. Handles share state, so a
//! test can keep one handle for assertions after moving the other into a
//! gateway.

use std::sync::{Arc, Mutex};

use super::{BackendConfig, ModelRequest, RawReply, Transport, TransportError};

#[derive(Debug, Clone)]
pub enum ScriptStep {
    Text(String),
    Image(Vec<u8>),
    FailRetryable(String),
    FailFatal(String),
}

#[derive(Default)]
struct Inner {
    steps: Mutex<std::collections::VecDeque<ScriptStep>>,
    seen: Mutex<Vec<ModelRequest>>,
}

pub struct ScriptedTransport {
    inner: Arc<Inner>,
}

impl ScriptedTransport {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        ScriptedTransport {
            inner: Arc::new(Inner {
                steps: Mutex::new(steps.into()),
                seen: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn texts(steps: &[&str]) -> Self {
        Self::new(
            steps
                .iter()
                .map(|s| ScriptStep::Text(s.to_string()))
                .collect(),
        )
    }

    /// A second handle over the same script and request log.
    pub fn clone_handle(&self) -> Self {
        ScriptedTransport {
            inner: Arc::clone(&self.inner),
        }
    }

    /// Requests observed so far, in call order.
    pub fn requests(&self) -> Vec<ModelRequest> {
        self.inner.seen.lock().expect("script lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.inner.seen.lock().expect("script lock").len()
    }
}

impl Transport for ScriptedTransport {
    fn execute(
        &self,
        _config: &BackendConfig,
        request: &ModelRequest,
    ) -> Result<RawReply, TransportError> {
        self.inner
            .seen
            .lock()
            .expect("script lock")
            .push(request.clone());
        let step = self
            .inner
            .steps
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or_else(|| TransportError::Fatal("script exhausted".into()))?;
        match step {
            ScriptStep::Text(text) => Ok(RawReply { text, image: None }),
            ScriptStep::Image(bytes) => Ok(RawReply {
                text: String::new(),
                image: Some(bytes),
            }),
            ScriptStep::FailRetryable(msg) => Err(TransportError::Retryable(msg)),
            ScriptStep::FailFatal(msg) => Err(TransportError::Fatal(msg)),
        }
    }
}
