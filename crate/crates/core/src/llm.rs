//! Chat-completion providers.
//!
//! Engines talk to a [`ChatProvider`]. Besides the HTTP client there are
//! offline providers: a scripted one that plays back a fixed list of
//! responses, a replay provider that re-serves a recorded transcript (and
//! checks the prompts match), and a closure adapter for tests.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::embedding::retryable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    /// Image forwarded to multimodal providers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
            image: None,
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            image: None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderError {
    #[error("chat endpoint failed (status {status:?}): {message}")]
    Remote { status: Option<u16>, message: String },
    #[error("scripted provider has no response left for call {call}")]
    ScriptExhausted { call: usize },
    #[error("replay diverged at call {call}: {reason}")]
    ReplayMismatch { call: usize, reason: String },
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Other(String),
}

/// A chat model. Implementations must be safe to share across threads.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError>;

    /// Whether attached images are forwarded to the model.
    fn supports_images(&self) -> bool {
        false
    }
}

/// Plays back a fixed list of responses in order.
pub struct ScriptedChat {
    responses: Mutex<VecDeque<String>>,
    served: Mutex<usize>,
}

/// Separator between responses in a script file.
pub const SCRIPT_SEPARATOR: &str = "---";

impl ScriptedChat {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedChat {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            served: Mutex::new(0),
        }
    }

    /// Parses a script: plain-text responses separated by lines holding only
    /// `---`. Surrounding blank lines of each response are trimmed.
    pub fn parse(text: &str) -> Self {
        let mut responses = Vec::new();
        let mut current = Vec::new();
        for line in text.lines() {
            if line.trim_end() == SCRIPT_SEPARATOR {
                responses.push(current.join("\n").trim().to_string());
                current.clear();
            } else {
                current.push(line);
            }
        }
        let last = current.join("\n").trim().to_string();
        if !last.is_empty() {
            responses.push(last);
        }
        ScriptedChat::new(responses)
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.responses.lock().expect("script lock").len()
    }
}

impl ChatProvider for ScriptedChat {
    fn complete(&self, _messages: &[ChatMessage]) -> Result<String, ProviderError> {
        let mut served = self.served.lock().expect("script lock");
        *served += 1;
        self.responses
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or(ProviderError::ScriptExhausted { call: *served })
    }
}

/// Re-serves recorded (prompt, response) pairs, failing on any divergence in
/// the prompts it is sent.
pub struct ReplayChat {
    calls: Mutex<VecDeque<(Vec<ChatMessage>, String)>>,
    next: Mutex<usize>,
}

impl ReplayChat {
    pub fn new(calls: Vec<(Vec<ChatMessage>, String)>) -> Self {
        ReplayChat {
            calls: Mutex::new(calls.into()),
            next: Mutex::new(0),
        }
    }
}

impl ChatProvider for ReplayChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        let mut next = self.next.lock().expect("replay lock");
        let call = *next;
        *next += 1;
        let (expected, response) = self
            .calls
            .lock()
            .expect("replay lock")
            .pop_front()
            .ok_or(ProviderError::ScriptExhausted { call })?;
        if expected != messages {
            return Err(ProviderError::ReplayMismatch {
                call,
                reason: "prompt differs from recording".into(),
            });
        }
        Ok(response)
    }
}

/// Adapts a closure into a provider.
pub struct FnChat<F>(pub F);

impl<F> ChatProvider for FnChat<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, ProviderError> + Send + Sync,
{
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        (self.0)(messages)
    }
}

/// Remote chat settings. The API key is read from `LLM_API_KEY` at build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub multimodal: bool,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

impl RemoteChatConfig {
    /// Reads `LLM_ENDPOINT`, `LLM_MODEL` and `LLM_MULTIMODAL`.
    pub fn from_env() -> Result<Self, ProviderError> {
        let endpoint = std::env::var("LLM_ENDPOINT")
            .map_err(|_| ProviderError::Config("LLM_ENDPOINT is not set".into()))?;
        let model = std::env::var("LLM_MODEL")
            .map_err(|_| ProviderError::Config("LLM_MODEL is not set".into()))?;
        let multimodal = matches!(
            std::env::var("LLM_MULTIMODAL").as_deref(),
            Ok("1") | Ok("true") | Ok("yes")
        );
        Ok(RemoteChatConfig {
            endpoint,
            model,
            temperature: 0.0,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            multimodal,
        })
    }
}

/// Client for an endpoint accepting `{model, messages:[{role, content}]}`
/// and answering `{choices:[{message:{content}}]}`.
pub struct RemoteChat {
    config: RemoteChatConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteChat {
    pub fn new(config: RemoteChatConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        RemoteChat {
            config,
            api_key: std::env::var("LLM_API_KEY").ok(),
            agent,
        }
    }

    pub fn from_env() -> Result<Self, ProviderError> {
        Ok(Self::new(RemoteChatConfig::from_env()?))
    }

    fn message_json(&self, m: &ChatMessage) -> Value {
        match (&m.image, self.config.multimodal) {
            (Some(path), true) => {
                let mut parts = vec![json!({"type": "text", "text": m.content})];
                if let Some(url) = image_data_url(path) {
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
                json!({"role": m.role, "content": parts})
            }
            _ => json!({"role": m.role, "content": m.content}),
        }
    }

    fn call_once(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": messages.iter().map(|m| self.message_json(m)).collect::<Vec<_>>(),
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => ProviderError::Remote {
                status: Some(code),
                message: format!("endpoint returned HTTP {code}"),
            },
            other => ProviderError::Remote {
                status: None,
                message: other.to_string(),
            },
        })?;
        let value: Value = resp.body_mut().read_json().map_err(|e| ProviderError::Remote {
            status: None,
            message: format!("malformed response: {e}"),
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Remote {
                status: None,
                message: "response has no choices[0].message.content".into(),
            })
    }
}

fn image_data_url(path: &str) -> Option<String> {
    if path.starts_with("http://") || path.starts_with("https://") || path.starts_with("data:") {
        return Some(path.to_string());
    }
    let bytes = std::fs::read(path).ok()?;
    let mime = match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        _ => "image/jpeg",
    };
    Some(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

impl ChatProvider for RemoteChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.call_once(messages) {
                Ok(text) => return Ok(text),
                Err(ProviderError::Remote { status, .. })
                    if attempt < self.config.max_retries && retryable(status) =>
                {
                    std::thread::sleep(Duration::from_millis(500 << attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn supports_images(&self) -> bool {
        self.config.multimodal
    }
}
