//! Chat-completion clients.
//!
//! [`RemoteLlm`] speaks the common `chat/completions` JSON shape.
//! [`ScriptedLlm`] answers from a substring-matched script and records every
//! call, so pipelines, evaluation and refereeing can run offline.

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FALLBACK_REPLY: &str = "I'm sorry, I cannot help with that.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("conversation must end with a user message")]
    NoUserMessage,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid LLM config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, LlmError>;

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
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

fn last_user_message(messages: &[ChatMessage]) -> Result<&str> {
    match messages.last() {
        Some(m) if m.role == Role::User && !m.content.trim().is_empty() => Ok(&m.content),
        _ => Err(LlmError::NoUserMessage),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Timeout,
    Http,
    Malformed,
}

/// One scripted rule: if `matcher` occurs in the last user message, reply
/// with `reply` (or fail, if `fail` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub matcher: String,
    #[serde(default)]
    pub reply: String,
    #[serde(default)]
    pub fail: Option<ScriptedFailure>,
}

impl ScriptEntry {
    pub fn new(matcher: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            matcher: matcher.into(),
            reply: reply.into(),
            fail: None,
        }
    }

    pub fn failing(matcher: impl Into<String>, fail: ScriptedFailure) -> Self {
        Self {
            matcher: matcher.into(),
            reply: String::new(),
            fail: Some(fail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmKind {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub kind: LlmKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// Extra attempts after a transport failure or 5xx.
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub fallback_reply: Option<String>,
}

fn default_max_tokens() -> u32 {
    512
}

fn default_timeout_secs() -> f64 {
    60.0
}

impl LlmConfig {
    pub fn scripted(script: Vec<ScriptEntry>) -> Self {
        Self {
            kind: LlmKind::Scripted,
            endpoint: String::new(),
            model_name: String::new(),
            api_key: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            retries: 0,
            script,
            fallback_reply: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: LlmKind::Remote,
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            ..Self::scripted(vec![])
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LlmKind::Remote
            && (self.endpoint.trim().is_empty() || self.model_name.trim().is_empty())
        {
            return Err(LlmError::InvalidConfig(
                "remote LLM requires endpoint and model_name".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 || self.max_tokens == 0 {
            return Err(LlmError::InvalidConfig(
                "temperature must be >= 0 and max_tokens >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn LlmClient>> {
        self.validate()?;
        Ok(match self.kind {
            LlmKind::Remote => Arc::new(RemoteLlm::new(self.clone())?),
            LlmKind::Scripted => Arc::new(ScriptedLlm::from_config(self)),
        })
    }
}

/// One-shot helper: build a client from `config` and run one completion.
pub fn complete(config: &LlmConfig, messages: &[ChatMessage]) -> Result<String> {
    last_user_message(messages)?;
    config.build()?.complete(messages)
}

/// Deterministic client driven by a substring script.
pub struct ScriptedLlm {
    script: Vec<ScriptEntry>,
    fallback: String,
    transcript: Mutex<Vec<Vec<ChatMessage>>>,
}

impl fmt::Debug for ScriptedLlm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedLlm")
            .field("entries", &self.script.len())
            .field("calls", &self.call_count())
            .finish()
    }
}

impl ScriptedLlm {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        Self {
            script,
            fallback: DEFAULT_FALLBACK_REPLY.to_string(),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn from_config(config: &LlmConfig) -> Self {
        let mut s = Self::new(config.script.clone());
        if let Some(f) = &config.fallback_reply {
            s.fallback = f.clone();
        }
        s
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }

    pub fn call_count(&self) -> usize {
        self.transcript.lock().unwrap().len()
    }

    /// Every message list this client has been called with, in call order.
    pub fn transcript(&self) -> Vec<Vec<ChatMessage>> {
        self.transcript.lock().unwrap().clone()
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let last = last_user_message(messages)?;
        self.transcript.lock().unwrap().push(messages.to_vec());
        match self.script.iter().find(|e| last.contains(&e.matcher)) {
            Some(ScriptEntry { fail: Some(f), .. }) => Err(match f {
                ScriptedFailure::Timeout => LlmError::Timeout,
                ScriptedFailure::Http => LlmError::HttpError {
                    status: 500,
                    body: "scripted failure".into(),
                },
                ScriptedFailure::Malformed => {
                    LlmError::MalformedResponse("scripted failure".into())
                }
            }),
            Some(e) => Ok(e.reply.clone()),
            None => Ok(self.fallback.clone()),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

pub struct RemoteLlm {
    config: LlmConfig,
    http: reqwest::blocking::Client,
}

impl RemoteLlm {
    pub fn new(config: LlmConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { config, http })
    }

    fn attempt(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model_name,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let mut req = self.http.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let text = resp.text().map_err(classify)?;
        if !status.is_success() {
            return Err(LlmError::HttpError {
                status: status.as_u16(),
                body: text.chars().take(200).collect(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message.content".into()))
    }
}

fn classify(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

fn retryable(e: &LlmError) -> bool {
    match e {
        LlmError::Timeout | LlmError::Transport(_) => true,
        LlmError::HttpError { status, .. } => *status >= 500,
        _ => false,
    }
}

impl LlmClient for RemoteLlm {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        last_user_message(messages)?;
        let mut attempt = 0;
        loop {
            match self.attempt(messages) {
                Err(e) if retryable(&e) && attempt < self.config.retries => attempt += 1,
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_lookup() {
        let llm = ScriptedLlm::new(vec![ScriptEntry::new(
            "ibuprofen",
            "search_engine(ibuprofen dosage)",
        )]);
        let out = llm
            .complete(&[ChatMessage::user("how much ibuprofen can I take?")])
            .unwrap();
        assert_eq!(out, "search_engine(ibuprofen dosage)");
        assert_eq!(llm.call_count(), 1);
    }

    #[test]
    fn scripted_fallback() {
        let llm = ScriptedLlm::new(vec![ScriptEntry::new("ibuprofen", "x")]);
        assert_eq!(
            llm.complete(&[ChatMessage::user("hello")]).unwrap(),
            DEFAULT_FALLBACK_REPLY
        );
    }

    #[test]
    fn matcher_only_checks_last_user_message() {
        let llm = ScriptedLlm::new(vec![ScriptEntry::new("ibuprofen", "x")]);
        let msgs = [ChatMessage::system("ibuprofen"), ChatMessage::user("hello")];
        assert_eq!(llm.complete(&msgs).unwrap(), DEFAULT_FALLBACK_REPLY);
    }

    #[test]
    fn empty_messages_rejected() {
        let cfg = LlmConfig::scripted(vec![]);
        assert_eq!(complete(&cfg, &[]), Err(LlmError::NoUserMessage));
        let llm = ScriptedLlm::new(vec![]);
        assert_eq!(
            llm.complete(&[ChatMessage::assistant("hi")]),
            Err(LlmError::NoUserMessage)
        );
        assert_eq!(llm.call_count(), 0);
    }

    #[test]
    fn scripted_failures() {
        let llm = ScriptedLlm::new(vec![ScriptEntry::failing("slow", ScriptedFailure::Timeout)]);
        assert_eq!(
            llm.complete(&[ChatMessage::user("slow one")]),
            Err(LlmError::Timeout)
        );
    }

    #[test]
    fn remote_config_requires_endpoint() {
        let cfg = LlmConfig::remote("", "m");
        assert!(matches!(cfg.build(), Err(LlmError::InvalidConfig(_))));
    }

    #[test]
    fn config_from_toml() {
        let cfg: LlmConfig = toml::from_str(
            r#"
            kind = "scripted"
            fallback_reply = "nope"
            [[script]]
            matcher = "a"
            reply = "b"
            [[script]]
            matcher = "slow"
            fail = "timeout"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.script.len(), 2);
        let llm = ScriptedLlm::from_config(&cfg);
        assert_eq!(llm.complete(&[ChatMessage::user("zzz")]).unwrap(), "nope");
    }
}
