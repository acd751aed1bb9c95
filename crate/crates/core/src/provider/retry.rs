use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    ChatProvider, ChatRequest, ChatResponse, Embedder, EmbeddingVector, ProviderError,
    ProviderErrorKind,
};

/// Bounded exponential backoff for transient provider failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Same attempt budget, no waiting. For scripted backends.
    pub fn immediate() -> Self {
        Self {
            base_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    /// Delay before attempt `attempt + 1`, where `attempt` counts failures so far (>= 1).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let exp = self.factor.powi(attempt.saturating_sub(1) as i32);
        self.base_delay.mul_f64(exp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub response: ChatResponse,
    /// Total attempts made, 1 when the first call succeeded.
    pub attempts: u32,
}

impl ChatReply {
    pub fn retries(&self) -> u32 {
        self.attempts - 1
    }
}

fn retrying<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, ProviderError>,
) -> Result<(T, u32), ProviderError> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op() {
            Ok(v) => return Ok((v, attempt)),
            Err(mut e) => {
                if !e.kind.is_transient() || attempt >= max {
                    e.attempts = attempt;
                    return Err(e);
                }
                let delay = policy.delay_after(attempt);
                log::debug!(
                    "transient provider failure ({}), retrying in {delay:?}",
                    e.kind
                );
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
            }
        }
    }
}

/// Sends `req`, retrying transient failures per `policy`. Refusals come back as
/// errors so callers never mistake them for content.
pub fn chat_with_retry(
    provider: &dyn ChatProvider,
    req: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<ChatReply, ProviderError> {
    if let Err(msg) = req.validate() {
        return Err(ProviderError::new(
            ProviderErrorKind::Refusal,
            format!("invalid request: {msg}"),
        ));
    }
    let (response, attempts) = retrying(policy, || provider.complete(req))?;
    if response.finish_reason == super::FinishReason::Refusal {
        return Err(ProviderError {
            kind: ProviderErrorKind::Refusal,
            message: format!("model refused request `{}`", req.request_tag),
            attempts,
        });
    }
    if response.text.is_empty() {
        return Err(ProviderError {
            kind: ProviderErrorKind::Refusal,
            message: format!("empty completion for `{}`", req.request_tag),
            attempts,
        });
    }
    Ok(ChatReply { response, attempts })
}

pub fn embed_with_retry(
    embedder: &dyn Embedder,
    texts: &[String],
    policy: &RetryPolicy,
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    let (vectors, _) = retrying(policy, || embedder.embed(texts))?;
    if vectors.len() != texts.len() {
        return Err(ProviderError::new(
            ProviderErrorKind::Transport,
            format!(
                "embedder returned {} vectors for {} texts",
                vectors.len(),
                texts.len()
            ),
        ));
    }
    Ok(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ChatMessage, ScriptEntry, ScriptedChat, ScriptedFault};

    fn req() -> ChatRequest {
        ChatRequest::new(
            "m",
            "narrative",
            vec![ChatMessage::system("s"), ChatMessage::user("u")],
        )
    }

    #[test]
    fn backoff_doubles_from_one_second() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_after(1), Duration::from_secs(1));
        assert_eq!(p.delay_after(2), Duration::from_secs(2));
        assert_eq!(p.delay_after(4), Duration::from_secs(8));
    }

    #[test]
    fn two_failures_then_success_reports_three_attempts() {
        let chat = ScriptedChat::new(vec![
            ScriptEntry::fault("*", ScriptedFault::RateLimited),
            ScriptEntry::fault("*", ScriptedFault::Transport),
            ScriptEntry::reply("*", "ok"),
        ]);
        let reply = chat_with_retry(&chat, &req(), &RetryPolicy::immediate()).unwrap();
        assert_eq!(reply.response.text, "ok");
        assert_eq!(reply.attempts, 3);
        assert_eq!(reply.retries(), 2);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let chat = ScriptedChat::new(vec![
            ScriptEntry::fault("*", ScriptedFault::RateLimited).repeating()
        ]);
        let err = chat_with_retry(&chat, &req(), &RetryPolicy::immediate()).unwrap_err();
        assert_eq!(err.kind, ProviderErrorKind::RateLimited);
        assert_eq!(err.attempts, 5);
    }

    #[test]
    fn unauthorized_is_not_retried() {
        let chat = ScriptedChat::new(vec![
            ScriptEntry::fault("*", ScriptedFault::Unauthorized),
            ScriptEntry::reply("*", "never"),
        ]);
        let err = chat_with_retry(&chat, &req(), &RetryPolicy::immediate()).unwrap_err();
        assert_eq!(err.kind, ProviderErrorKind::HttpStatus(401));
        assert_eq!(err.attempts, 1);
    }

    #[test]
    fn refusal_surfaces_as_error() {
        let chat = ScriptedChat::new(vec![ScriptEntry::fault("*", ScriptedFault::Refusal)]);
        let err = chat_with_retry(&chat, &req(), &RetryPolicy::immediate()).unwrap_err();
        assert_eq!(err.kind, ProviderErrorKind::Refusal);
    }
}
