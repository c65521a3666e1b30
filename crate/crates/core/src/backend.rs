//! Text-generation backends and helpers for recovering a JSON object from
//! free-form model output.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("scripted backend has no responses left")]
    Exhausted,
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that turns a prompt into a completion. Implementations must be
/// callable from several threads at once.
pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;

    /// Prompt size above which the backend cannot accept input.
    fn max_prompt_chars(&self) -> Option<usize> {
        None
    }
}

/// Chat-completion HTTP client (`POST {endpoint}` with a `messages` array).
pub struct ChatCompletionBackend {
    endpoint: String,
    token: String,
    timeout: Duration,
    max_retries: u32,
    backoff: Duration,
    max_prompt_chars: Option<usize>,
    agent: ureq::Agent,
}

impl ChatCompletionBackend {
    pub fn new(endpoint: impl Into<String>, token: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        ChatCompletionBackend {
            endpoint: endpoint.into(),
            token: token.into(),
            timeout,
            max_retries: 2,
            backoff: Duration::from_millis(500),
            max_prompt_chars: None,
            agent,
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn with_max_prompt_chars(mut self, limit: Option<usize>) -> Self {
        self.max_prompt_chars = limit;
        self
    }

    fn request_body(prompt: &str, params: &GenerationParams) -> serde_json::Value {
        let mut body = json!({
            "model": params.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, BackendError> {
        let response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(body);
        let mut response = match response {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout(self.timeout)),
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }
}

impl GenerationBackend for ChatCompletionBackend {
    fn name(&self) -> &str {
        &self.endpoint
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let body = Self::request_body(prompt, params);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        self.max_prompt_chars
    }
}

/// Replays canned responses in order, recording every prompt it receives.
#[derive(Default)]
pub struct ScriptedBackend {
    responses: Mutex<VecDeque<Result<String, BackendError>>>,
    prompts: Mutex<Vec<String>>,
    max_prompt_chars: Option<usize>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            responses: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            ..Default::default()
        }
    }

    pub fn failing(error: BackendError) -> Self {
        ScriptedBackend {
            responses: Mutex::new(VecDeque::from([Err(error)])),
            ..Default::default()
        }
    }

    pub fn with_max_prompt_chars(mut self, limit: usize) -> Self {
        self.max_prompt_chars = Some(limit);
        self
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl GenerationBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
        self.prompts.lock().expect("prompt log poisoned").push(prompt.to_string());
        self.responses
            .lock()
            .expect("response queue poisoned")
            .pop_front()
            .unwrap_or(Err(BackendError::Exhausted))
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        self.max_prompt_chars
    }
}

/// Content of the first fenced block, or the input when it has no fence.
pub fn strip_code_fences(raw: &str) -> &str {
    let Some(open) = raw.find("```") else { return raw };
    let after = &raw[open + 3..];
    // Skip an info string such as ```json.
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

/// The first brace-balanced `{...}` span, honouring JSON string escapes.
pub fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Fence stripping then object location.
pub fn locate_json_object(raw: &str) -> Option<&str> {
    first_balanced_object(strip_code_fences(raw)).or_else(|| first_balanced_object(raw))
}
