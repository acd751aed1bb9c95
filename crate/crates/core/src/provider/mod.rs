//! Model access: chat completion and text embedding.
//!
//! Everything that talks to a language model goes through [`ChatProvider`] or
//! [`Embedder`]. Two families of implementations exist: [`HttpProvider`], which
//! speaks the common chat-completions / embeddings JSON protocol, and the
//! deterministic backends ([`ScriptedChat`], [`ChatFn`], [`HashEmbedder`]) used
//! for replays and tests.

mod embed;
mod http;
mod retry;
mod scripted;

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use embed::{fnv1a64, tokenize, HashEmbedder, HASH_EMBEDDING_DIM};
pub use http::{HttpProvider, WireLog, WireRecord};
pub use retry::{chat_with_retry, embed_with_retry, ChatReply, RetryPolicy};
pub use scripted::{glob_match, ChatFn, ScriptEntry, ScriptedChat, ScriptedFault};

/// Default sampling temperature for the simulated roles.
pub const SIMULATION_TEMPERATURE: f64 = 0.7;
/// Default sampling temperature for summarization, revision and continuation.
pub const EVALUATION_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    /// A previous model turn replayed into the request.
    AssistantTurn,
}

impl ChatRole {
    pub fn wire_name(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::AssistantTurn => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
    /// Correlates the request with trace events and scripted responses.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn new(
        model_id: impl Into<String>,
        tag: impl Into<String>,
        messages: Vec<ChatMessage>,
    ) -> Self {
        Self {
            messages,
            temperature: SIMULATION_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            model_id: model_id.into(),
            request_tag: tag.into(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Checks the request invariants: non-empty messages, system message first,
    /// non-negative temperature and a positive token budget.
    pub fn validate(&self) -> Result<(), String> {
        match self.messages.first() {
            None => return Err("messages must not be empty".into()),
            Some(m) if m.role != ChatRole::System => {
                return Err("first message must have the system role".into())
            }
            _ => {}
        }
        if !(self.temperature >= 0.0) {
            return Err(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            ));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }

    /// Stable digest of the request content, used by fingerprint-keyed scripts.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.model_id.as_bytes());
        for m in &self.messages {
            bytes.push(0);
            bytes.extend_from_slice(m.role.wire_name().as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(m.content.as_bytes());
        }
        fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Refusal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub token_usage: TokenUsage,
}

impl ChatResponse {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            token_usage: TokenUsage::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_id: impl Into<String>) -> Self {
        Self {
            values,
            model_id: model_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    LiveHttp,
    Scripted,
}

/// Who answers a request. Persisted into run manifests; never holds key material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderIdentity {
    pub id: String,
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_cutoff: Option<NaiveDate>,
}

impl ProviderIdentity {
    pub fn scripted(id: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            model_id: id.clone(),
            id,
            kind: ProviderKind::Scripted,
            base_url: None,
            api_key_env: None,
            knowledge_cutoff: None,
        }
    }

    pub fn live(
        id: impl Into<String>,
        base_url: impl Into<String>,
        model_id: impl Into<String>,
        api_key_env: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            kind: ProviderKind::LiveHttp,
            base_url: Some(base_url.into()),
            model_id: model_id.into(),
            api_key_env: Some(api_key_env.into()),
            knowledge_cutoff: None,
        }
    }

    pub fn with_cutoff(mut self, cutoff: NaiveDate) -> Self {
        self.knowledge_cutoff = Some(cutoff);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kind == ProviderKind::LiveHttp {
            if self
                .api_key_env
                .as_deref()
                .is_none_or(|v| v.trim().is_empty())
            {
                return Err(format!(
                    "live provider `{}` must name an api key env var",
                    self.id
                ));
            }
            if self.base_url.as_deref().is_none_or(|v| v.trim().is_empty()) {
                return Err(format!("live provider `{}` must have a base_url", self.id));
            }
        }
        Ok(())
    }
}

/// Identities bundled with the tool. Base URLs point at the vendors' public
/// chat-completions compatible endpoints; override with a providers file.
pub fn builtin_identities() -> Vec<ProviderIdentity> {
    let date = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).expect("valid date");
    vec![
        ProviderIdentity::live(
            "gpt-4o",
            "https://api.openai.com/v1",
            "gpt-4o",
            "OPENAI_API_KEY",
        )
        .with_cutoff(date(2023, 10, 31)),
        ProviderIdentity::live(
            "llama-3.1-70b",
            "https://api.together.xyz/v1",
            "meta-llama/Meta-Llama-3.1-70B-Instruct-Turbo",
            "TOGETHER_API_KEY",
        )
        .with_cutoff(date(2023, 12, 31)),
        ProviderIdentity::live(
            "mixtral-8x7b",
            "https://api.together.xyz/v1",
            "mistralai/Mixtral-8x7B-Instruct-v0.1",
            "TOGETHER_API_KEY",
        )
        .with_cutoff(date(2023, 9, 30)),
        ProviderIdentity::live(
            "all-mpnet-base-v2",
            "http://127.0.0.1:8080/v1",
            "sentence-transformers/all-mpnet-base-v2",
            "EMBEDDINGS_API_KEY",
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum ProviderErrorKind {
    Transport,
    HttpStatus(u16),
    RateLimited,
    Refusal,
    MissingApiKey(String),
    ScriptExhausted,
}

impl ProviderErrorKind {
    /// Whether a retry can reasonably succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderErrorKind::Transport | ProviderErrorKind::RateLimited => true,
            ProviderErrorKind::HttpStatus(code) => *code >= 500,
            _ => false,
        }
    }
}

impl fmt::Display for ProviderErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderErrorKind::Transport => write!(f, "transport failure"),
            ProviderErrorKind::HttpStatus(code) => write!(f, "http status {code}"),
            ProviderErrorKind::RateLimited => write!(f, "rate limited"),
            ProviderErrorKind::Refusal => write!(f, "refusal"),
            ProviderErrorKind::MissingApiKey(var) => write!(f, "missing api key env var {var}"),
            ProviderErrorKind::ScriptExhausted => write!(f, "script exhausted"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("provider error ({kind}) after {attempts} attempt(s): {message}")]
pub struct ProviderError {
    pub kind: ProviderErrorKind,
    pub message: String,
    pub attempts: u32,
}

impl ProviderError {
    pub fn new(kind: ProviderErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            attempts: 1,
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn identity(&self) -> &ProviderIdentity;

    /// One attempt, no retries. See [`chat_with_retry`].
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn identity(&self) -> &ProviderIdentity;

    /// Output order matches input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_requires_leading_system_message() {
        let req = ChatRequest::new("m", "t", vec![ChatMessage::user("hi")]);
        assert!(req.validate().is_err());
        let req = ChatRequest::new("m", "t", vec![]);
        assert!(req.validate().is_err());
        let req = ChatRequest::new(
            "m",
            "t",
            vec![ChatMessage::system("s"), ChatMessage::user("hi")],
        );
        assert!(req.validate().is_ok());
    }

    #[test]
    fn live_identity_needs_key_var() {
        let mut id = ProviderIdentity::live("x", "http://h", "m", "KEY");
        assert!(id.validate().is_ok());
        id.api_key_env = Some(" ".into());
        assert!(id.validate().is_err());
    }

    #[test]
    fn auth_errors_are_not_transient() {
        assert!(!ProviderErrorKind::HttpStatus(401).is_transient());
        assert!(ProviderErrorKind::HttpStatus(503).is_transient());
        assert!(ProviderErrorKind::RateLimited.is_transient());
    }
}
