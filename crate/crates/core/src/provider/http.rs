use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    ChatProvider, ChatRequest, ChatResponse, Embedder, EmbeddingVector, FinishReason,
    ProviderError, ProviderErrorKind, ProviderIdentity, ProviderKind, TokenUsage,
};

/// One request/response exchange as seen on the wire. The authorization
/// header is never captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub tag: String,
    pub url: String,
    pub authorization: String,
    pub request: Value,
    pub status: Option<u16>,
    pub response: Value,
}

#[derive(Debug, Clone, Default)]
pub struct WireLog(Arc<Mutex<Vec<WireRecord>>>);

impl WireLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, record: WireRecord) {
        self.0.lock().expect("wire log poisoned").push(record);
    }

    pub fn records(&self) -> Vec<WireRecord> {
        self.0.lock().expect("wire log poisoned").clone()
    }
}

/// Client for endpoints speaking the chat-completions / embeddings JSON shape:
/// `POST {base_url}/chat/completions` and `POST {base_url}/embeddings`.
pub struct HttpProvider {
    identity: ProviderIdentity,
    api_key: String,
    client: reqwest::blocking::Client,
    wire: Option<WireLog>,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("identity", &self.identity)
            .finish_non_exhaustive()
    }
}

impl HttpProvider {
    /// Reads the key from the identity's env var; the only ambient input.
    pub fn from_env(identity: ProviderIdentity) -> Result<Self, ProviderError> {
        let var = identity.api_key_env.clone().unwrap_or_default();
        match std::env::var(&var) {
            Ok(key) if !key.is_empty() => Self::with_key(identity, key),
            _ => Err(ProviderError::new(
                ProviderErrorKind::MissingApiKey(var.clone()),
                format!("set {var} to use provider `{}`", identity.id),
            )),
        }
    }

    pub fn with_key(
        identity: ProviderIdentity,
        api_key: impl Into<String>,
    ) -> Result<Self, ProviderError> {
        if identity.kind != ProviderKind::LiveHttp {
            return Err(ProviderError::new(
                ProviderErrorKind::Transport,
                format!("provider `{}` is not a live identity", identity.id),
            ));
        }
        identity
            .validate()
            .map_err(|m| ProviderError::new(ProviderErrorKind::Transport, m))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ProviderError::new(ProviderErrorKind::Transport, e.to_string()))?;
        Ok(Self {
            identity,
            api_key: api_key.into(),
            client,
            wire: None,
        })
    }

    pub fn with_wire_log(mut self, log: WireLog) -> Self {
        self.wire = Some(log);
        self
    }

    fn endpoint(&self, path: &str) -> String {
        let base = self.identity.base_url.as_deref().unwrap_or_default();
        format!("{}/{path}", base.trim_end_matches('/'))
    }

    fn post(&self, tag: &str, path: &str, body: Value) -> Result<Value, ProviderError> {
        let url = self.endpoint(path);
        let result = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send();
        let (status, payload, outcome) = match result {
            Err(e) => (
                None,
                Value::Null,
                Err(ProviderError::new(
                    ProviderErrorKind::Transport,
                    e.to_string(),
                )),
            ),
            Ok(resp) => {
                let status = resp.status().as_u16();
                let text = resp.text().unwrap_or_default();
                let payload: Value = serde_json::from_str(&text).unwrap_or(Value::String(text));
                let outcome = match status {
                    200..=299 => Ok(payload.clone()),
                    429 => Err(ProviderError::new(
                        ProviderErrorKind::RateLimited,
                        error_message(&payload),
                    )),
                    _ => Err(ProviderError::new(
                        ProviderErrorKind::HttpStatus(status),
                        error_message(&payload),
                    )),
                };
                (Some(status), payload, outcome)
            }
        };
        if let Some(wire) = &self.wire {
            wire.push(WireRecord {
                tag: tag.to_string(),
                url,
                authorization: "Bearer [redacted]".into(),
                request: body,
                status,
                response: payload,
            });
        }
        outcome
    }
}

fn error_message(payload: &Value) -> String {
    payload
        .pointer("/error/message")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| payload.to_string())
}

fn malformed(what: &str) -> ProviderError {
    ProviderError::new(
        ProviderErrorKind::Transport,
        format!("malformed response: {what}"),
    )
}

impl ChatProvider for HttpProvider {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| json!({"role": m.role.wire_name(), "content": m.content}))
            .collect();
        let body = json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let payload = self.post(&req.request_tag, "chat/completions", body)?;
        let choice = payload
            .pointer("/choices/0")
            .ok_or_else(|| malformed("no choices"))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("length") => FinishReason::Length,
            Some("content_filter") | Some("refusal") => FinishReason::Refusal,
            _ if choice
                .pointer("/message/refusal")
                .is_some_and(|r| !r.is_null()) =>
            {
                FinishReason::Refusal
            }
            _ => FinishReason::Stop,
        };
        let usage = |k: &str| {
            payload
                .pointer(&format!("/usage/{k}"))
                .and_then(Value::as_u64)
                .unwrap_or(0)
        };
        Ok(ChatResponse {
            text,
            finish_reason,
            token_usage: TokenUsage {
                prompt: usage("prompt_tokens"),
                completion: usage("completion_tokens"),
            },
        })
    }
}

impl Embedder for HttpProvider {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let body = json!({"model": self.identity.model_id, "input": texts});
        let payload = self.post("embeddings", "embeddings", body)?;
        let data = payload
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("no data array"))?;
        let mut indexed = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map_or(pos, |i| i as usize);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("embedding missing"))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| malformed("non-finite value"))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            indexed.push((index, values));
        }
        indexed.sort_by_key(|(i, _)| *i);
        if indexed.len() != texts.len() {
            return Err(malformed("embedding count differs from input count"));
        }
        let dim = indexed.first().map(|(_, v)| v.len()).unwrap_or(0);
        if indexed.iter().any(|(_, v)| v.len() != dim) {
            return Err(malformed("embeddings of differing dimension"));
        }
        Ok(indexed
            .into_iter()
            .map(|(_, v)| EmbeddingVector::new(v, self.identity.model_id.clone()))
            .collect())
    }
}
