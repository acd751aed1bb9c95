use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    ChatProvider, ChatRequest, ChatResponse, FinishReason, ProviderError, ProviderErrorKind,
    ProviderIdentity, TokenUsage,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFault {
    RateLimited,
    Transport,
    Unauthorized,
    ServerError,
    Refusal,
}

/// One line of a replay script: the first unconsumed entry whose `tag`
/// pattern matches a request's tag answers it. `*` matches any run of
/// characters. Entries marked `repeat` are never consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<ScriptedFault>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl ScriptEntry {
    pub fn reply(tag: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            response: Some(response.into()),
            fail: None,
            repeat: false,
        }
    }

    pub fn fault(tag: impl Into<String>, fault: ScriptedFault) -> Self {
        Self {
            tag: tag.into(),
            response: None,
            fail: Some(fault),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

/// Glob match supporting `*` only.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

enum Mode {
    Script {
        entries: Vec<ScriptEntry>,
        consumed: Vec<bool>,
    },
    Fingerprint {
        pool: Vec<String>,
    },
}

struct State {
    mode: Mode,
    requests: Vec<ChatRequest>,
}

/// Deterministic chat backend driven by a replay script.
pub struct ScriptedChat {
    identity: ProviderIdentity,
    state: Mutex<State>,
}

impl ScriptedChat {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let consumed = vec![false; entries.len()];
        Self::with_mode(Mode::Script { entries, consumed })
    }

    /// Answers requests in order regardless of tag.
    pub fn queue<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(
            responses
                .into_iter()
                .map(|r| ScriptEntry::reply("*", r))
                .collect(),
        )
    }

    /// Stateless: the response is picked from `pool` by the request fingerprint,
    /// so identical requests always get identical responses.
    pub fn fingerprinted<S: Into<String>>(pool: impl IntoIterator<Item = S>) -> Self {
        let pool: Vec<String> = pool.into_iter().map(Into::into).collect();
        assert!(!pool.is_empty(), "fingerprint pool must not be empty");
        Self::with_mode(Mode::Fingerprint { pool })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("script: {e}")))?;
        Ok(Self::new(entries))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn with_identity(mut self, identity: ProviderIdentity) -> Self {
        self.identity = identity;
        self
    }

    fn with_mode(mode: Mode) -> Self {
        Self {
            identity: ProviderIdentity::scripted("scripted"),
            state: Mutex::new(State {
                mode,
                requests: Vec::new(),
            }),
        }
    }

    /// Every request seen so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state
            .lock()
            .expect("script state poisoned")
            .requests
            .clone()
    }

    /// Number of non-repeating entries not yet used.
    pub fn remaining(&self) -> usize {
        match &self.state.lock().expect("script state poisoned").mode {
            Mode::Script { entries, consumed } => entries
                .iter()
                .zip(consumed)
                .filter(|(e, c)| !e.repeat && !**c)
                .count(),
            Mode::Fingerprint { .. } => usize::MAX,
        }
    }
}

fn fault_error(
    fault: ScriptedFault,
    tag: &str,
) -> std::result::Result<ChatResponse, ProviderError> {
    let kind = match fault {
        ScriptedFault::RateLimited => ProviderErrorKind::RateLimited,
        ScriptedFault::Transport => ProviderErrorKind::Transport,
        ScriptedFault::Unauthorized => ProviderErrorKind::HttpStatus(401),
        ScriptedFault::ServerError => ProviderErrorKind::HttpStatus(500),
        ScriptedFault::Refusal => {
            return Ok(ChatResponse {
                text: String::new(),
                finish_reason: FinishReason::Refusal,
                token_usage: TokenUsage::default(),
            })
        }
    };
    Err(ProviderError::new(
        kind,
        format!("injected fault for `{tag}`"),
    ))
}

impl ChatProvider for ScriptedChat {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, ProviderError> {
        let mut state = self.state.lock().expect("script state poisoned");
        state.requests.push(req.clone());
        match &mut state.mode {
            Mode::Fingerprint { pool } => {
                let idx = (req.fingerprint() % pool.len() as u64) as usize;
                Ok(ChatResponse::stop(pool[idx].clone()))
            }
            Mode::Script { entries, consumed } => {
                let hit = entries
                    .iter()
                    .zip(consumed.iter())
                    .position(|(e, used)| !*used && glob_match(&e.tag, &req.request_tag));
                let Some(i) = hit else {
                    return Err(ProviderError::new(
                        ProviderErrorKind::ScriptExhausted,
                        format!("no script entry matches `{}`", req.request_tag),
                    ));
                };
                if !entries[i].repeat {
                    consumed[i] = true;
                }
                let entry = &entries[i];
                if let Some(fault) = entry.fail {
                    return fault_error(fault, &req.request_tag);
                }
                Ok(ChatResponse::stop(
                    entry.response.clone().unwrap_or_default(),
                ))
            }
        }
    }
}

/// Adapts a closure into a chat provider. Handy for computed scripts.
pub struct ChatFn<F> {
    identity: ProviderIdentity,
    f: F,
}

impl<F> ChatFn<F>
where
    F: Fn(&ChatRequest) -> std::result::Result<ChatResponse, ProviderError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self {
            identity: ProviderIdentity::scripted("fn"),
            f,
        }
    }

    pub fn with_identity(mut self, identity: ProviderIdentity) -> Self {
        self.identity = identity;
        self
    }
}

impl<F> ChatProvider for ChatFn<F>
where
    F: Fn(&ChatRequest) -> std::result::Result<ChatResponse, ProviderError> + Send + Sync,
{
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, ProviderError> {
        (self.f)(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ChatMessage;

    fn req(tag: &str, body: &str) -> ChatRequest {
        ChatRequest::new(
            "m",
            tag,
            vec![ChatMessage::system("s"), ChatMessage::user(body)],
        )
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match("*", ""));
        assert!(glob_match("S1/*/avatar", "S1/r3/t2/avatar"));
        assert!(!glob_match("S1/*/avatar", "S2/r3/t2/avatar"));
        assert!(glob_match("*schedule", "S1/r1/schedule"));
        assert!(glob_match("a*b*c", "aXXbYYc"));
        assert!(!glob_match("a*b*c", "aXXbYY"));
        assert!(glob_match("exact", "exact"));
    }

    #[test]
    fn queue_answers_in_order() {
        let chat = ScriptedChat::queue(["R1", "R2"]);
        assert_eq!(chat.complete(&req("a", "x")).unwrap().text, "R1");
        assert_eq!(chat.complete(&req("b", "x")).unwrap().text, "R2");
        let err = chat.complete(&req("c", "x")).unwrap_err();
        assert_eq!(err.kind, ProviderErrorKind::ScriptExhausted);
    }

    #[test]
    fn fingerprint_mode_is_pure() {
        let chat = ScriptedChat::fingerprinted(["a", "b", "c", "d"]);
        let r = req("t", "same prompt");
        let first = chat.complete(&r).unwrap();
        let second = chat.complete(&r).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn tags_select_entries_and_repeat_sticks() {
        let chat = ScriptedChat::new(vec![
            ScriptEntry::reply("*/avatar", "hello").repeating(),
            ScriptEntry::reply("*/assistant", "one"),
            ScriptEntry::reply("*/assistant", "two"),
        ]);
        assert_eq!(chat.complete(&req("r1/assistant", "")).unwrap().text, "one");
        assert_eq!(chat.complete(&req("r1/avatar", "")).unwrap().text, "hello");
        assert_eq!(chat.complete(&req("r2/avatar", "")).unwrap().text, "hello");
        assert_eq!(chat.complete(&req("r2/assistant", "")).unwrap().text, "two");
        assert_eq!(chat.remaining(), 0);
        assert_eq!(chat.requests().len(), 4);
    }

    #[test]
    fn script_file_format() {
        let chat = ScriptedChat::from_json(
            r#"[{"tag": "*", "response": "x", "repeat": true}, {"tag": "never", "fail": "rate_limited"}]"#,
        )
        .unwrap();
        assert_eq!(chat.complete(&req("any", "")).unwrap().text, "x");
        assert!(ScriptedChat::from_json(r#"[{"tag": "*", "reply": "x"}]"#).is_err());
    }
}
