use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::parse::{self, check_ratings, parse_reply, required_rating_keys, Reply};
use super::prompt::{per_turn_metrics, round_scenario};
use super::{
    build_prompt, enrichment_messages, schedule_messages, Decision, EnrichedActivity,
    PromptContext, Purpose, ScheduleEntry, SimulationState, Timestamp, Turn,
};
use crate::config::{Initiation, InterviewPhase, StudyConfig, TurnMode};
use crate::context::{
    apply_actions, check_action, state_diff, AvatarProfile, DeviceAction, EnvironmentConfig, Role,
};
use crate::error::{Error, Result};
use crate::provider::{
    chat_with_retry, ChatMessage, ChatProvider, ChatReply, ChatRequest, ProviderKind, RetryPolicy,
};
use crate::trace::EventKind;

/// Regenerations allowed after the first malformed output.
pub const FORMAT_RETRIES: u32 = 2;

/// Side records produced while a subject runs, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Journal {
    pub events: Vec<(EventKind, Value)>,
    pub env_states: Vec<Value>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: EventKind, payload: impl Serialize) {
        let value = serde_json::to_value(payload).expect("event payloads serialize");
        self.events.push((kind, value));
    }

    /// Prompt events sent on behalf of `role`.
    pub fn prompts(&self, role: Role) -> impl Iterator<Item = &Value> {
        self.events
            .iter()
            .filter(move |(k, v)| *k == EventKind::Prompt && v["role"] == role.as_str())
            .map(|(_, v)| v)
    }
}

/// One role's handle on a chat provider.
pub struct Caller<'a> {
    pub provider: &'a dyn ChatProvider,
    pub role: Role,
    pub policy: RetryPolicy,
    pub temperature: f64,
}

impl<'a> Caller<'a> {
    /// Scripted providers retry without waiting; live ones back off.
    pub fn new(provider: &'a dyn ChatProvider, role: Role) -> Self {
        let policy = match provider.identity().kind {
            ProviderKind::Scripted => RetryPolicy::immediate(),
            ProviderKind::LiveHttp => RetryPolicy::default(),
        };
        Self {
            provider,
            role,
            policy,
            temperature: crate::provider::SIMULATION_TEMPERATURE,
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn call(
        &self,
        journal: &mut Journal,
        tag: &str,
        messages: Vec<ChatMessage>,
    ) -> Result<ChatReply> {
        let req = ChatRequest::new(self.provider.identity().model_id.clone(), tag, messages)
            .with_temperature(self.temperature);
        journal.record(
            EventKind::Prompt,
            json!({
                "tag": tag,
                "role": self.role,
                "model_id": req.model_id,
                "temperature": req.temperature,
                "messages": req.messages,
            }),
        );
        match chat_with_retry(self.provider, &req, &self.policy) {
            Ok(reply) => {
                journal.record(
                    EventKind::Chat,
                    json!({
                        "tag": tag,
                        "role": self.role,
                        "attempts": reply.attempts,
                        "finish_reason": reply.response.finish_reason,
                        "token_usage": reply.response.token_usage,
                        "text": reply.response.text,
                    }),
                );
                Ok(reply)
            }
            Err(e) => {
                journal.record(
                    EventKind::Error,
                    json!({"tag": tag, "role": self.role, "attempts": e.attempts, "error": e.to_string()}),
                );
                Err(e.into())
            }
        }
    }

    /// Calls and parses, regenerating up to [`FORMAT_RETRIES`] times on
    /// output `parse` rejects.
    pub fn call_parsed<T>(
        &self,
        journal: &mut Journal,
        tag: &str,
        messages: Vec<ChatMessage>,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let mut reason = String::new();
        for attempt in 1..=1 + FORMAT_RETRIES {
            let mut msgs = messages.clone();
            if attempt > 1 {
                msgs.push(ChatMessage::user(format!(
                    "Your previous output could not be used ({reason}). Follow the output format exactly."
                )));
            }
            let reply = self.call(journal, tag, msgs)?;
            match parse(&reply.response.text) {
                Ok(v) => return Ok(v),
                Err(r) => {
                    journal.record(
                        EventKind::Error,
                        json!({"tag": tag, "role": self.role, "format_attempt": attempt, "error": r}),
                    );
                    reason = r;
                }
            }
        }
        Err(Error::Format {
            attempts: 1 + FORMAT_RETRIES,
            reason,
        })
    }
}

fn round_tag(state: &SimulationState) -> String {
    format!("{}/r{}", state.subject_id, state.round_index + 1)
}

/// Generates, parses and appends the next schedule entry. A start earlier than
/// the previous end is moved to it, keeping the duration, and traced.
pub fn generate_next_activity(
    state: &mut SimulationState,
    profile: &AvatarProfile,
    env: &EnvironmentConfig,
    study: &StudyConfig,
    caller: &Caller<'_>,
    journal: &mut Journal,
) -> Result<ScheduleEntry> {
    let tag = format!("{}/schedule", round_tag(state));
    let messages = schedule_messages(profile, env, state, study);
    let mut entry = caller.call_parsed(journal, &tag, messages, parse::parse_schedule_entry)?;
    if let Some(prev) = state.schedule.last() {
        if entry.start_time < prev.end_time {
            let duration = entry.end_time.secs() - entry.start_time.secs();
            let start = prev.end_time.clone();
            let end = Timestamp::from_secs(start.secs() + duration);
            journal.record(
                EventKind::Clamp,
                json!({
                    "tag": tag,
                    "previous_end": prev.end_time,
                    "original_start": entry.start_time,
                    "original_end": entry.end_time,
                    "start": start,
                    "end": end,
                }),
            );
            entry.start_time = start;
            entry.end_time = end;
        }
    }
    entry.seq = state.schedule.len() as u64 + 1;
    state.memory.append_activity(entry.seq)?;
    state.clock = entry.start_time.secs();
    state.environment.clock = state.clock;
    state.schedule.push(entry.clone());
    Ok(entry)
}

pub fn enrich_activity(
    state: &mut SimulationState,
    profile: &AvatarProfile,
    env: &EnvironmentConfig,
    study: &StudyConfig,
    caller: &Caller<'_>,
    journal: &mut Journal,
) -> Result<EnrichedActivity> {
    if state.current_activity().is_none() {
        return Err(Error::Precondition("no activity to enrich".into()));
    }
    let tag = format!("{}/enrich", round_tag(state));
    let messages = enrichment_messages(profile, env, state, study);
    let mut enriched = caller.call_parsed(journal, &tag, messages, parse::parse_enrichment)?;
    enriched.seq = state.enriched.len() as u64 + 1;
    state.enriched.push(enriched.clone());
    Ok(enriched)
}

/// Keeps the actions the environment supports; the rest become error events.
fn valid_actions(
    env: &EnvironmentConfig,
    actions: &[DeviceAction],
    tag: &str,
    journal: &mut Journal,
) -> Vec<DeviceAction> {
    actions
        .iter()
        .filter(|a| match check_action(env, a) {
            Ok(()) => true,
            Err(e) => {
                journal.record(
                    EventKind::Error,
                    json!({"tag": tag, "action": a, "error": e.to_string()}),
                );
                false
            }
        })
        .cloned()
        .collect()
}

fn avatar_reply_parser<'s>(
    study: &'s StudyConfig,
    require_decision: bool,
) -> impl Fn(&str) -> std::result::Result<Reply, String> + 's {
    let required: Vec<String> = per_turn_metrics(study)
        .iter()
        .flat_map(|m| required_rating_keys(study, m))
        .collect();
    move |raw| {
        let mut reply = parse_reply(raw);
        if !require_decision {
            reply.decision = Some(Decision::None);
            reply.ratings.clear();
            return Ok(reply);
        }
        match reply.decision {
            None if reply
                .malformed
                .iter()
                .any(|l| l.to_ascii_uppercase().contains("DECISION")) =>
            {
                Err(format!(
                    "unrecognised decision line: {}",
                    reply.malformed.join("; ")
                ))
            }
            None => Err("missing DECISION line".into()),
            Some(Decision::Ignore) => Ok(reply),
            Some(_) => {
                reply.ratings = check_ratings(study, &required, &reply.ratings)?;
                Ok(reply)
            }
        }
    }
}

/// Runs one assistant-avatar exchange and advances the round counter.
pub fn run_interaction_round(
    state: &mut SimulationState,
    study: &StudyConfig,
    env: &EnvironmentConfig,
    profile: &AvatarProfile,
    assistant: &Caller<'_>,
    avatar: &Caller<'_>,
    journal: &mut Journal,
) -> Result<()> {
    let policy = &study.policy;
    if state.round_index >= policy.max_rounds {
        return Err(Error::Precondition(format!(
            "all {} rounds have already run",
            policy.max_rounds
        )));
    }
    let round = state.round_index + 1;
    let activity = state
        .current_activity()
        .map(|e| e.activity.clone())
        .unwrap_or_default();
    let scenario_id = round_scenario(study, state).map(|s| s.scenario_id.clone());
    let mut speaker = match policy.initiation {
        Initiation::AvatarInitiated => Role::Avatar,
        Initiation::AssistantProactive | Initiation::Scripted => Role::Assistant,
    };
    let mut spoken = 0u32;
    let mut heard_both = (false, false);
    while spoken < policy.max_turns_per_round {
        let tag = format!("{}/t{}/{}", round_tag(state), spoken + 1, speaker.as_str());
        let ctx = PromptContext {
            role: speaker,
            purpose: Purpose::Turn,
            profile,
            environment: env,
        };
        let messages = build_prompt(&ctx, state, study);
        let reply = match speaker {
            Role::Assistant => {
                let reply = parse_reply(&assistant.call(journal, &tag, messages)?.response.text);
                Reply {
                    decision: Some(Decision::None),
                    ratings: BTreeMap::new(),
                    ..reply
                }
            }
            Role::Avatar => {
                let initiating = spoken == 0;
                avatar.call_parsed(
                    journal,
                    &tag,
                    messages,
                    avatar_reply_parser(study, !initiating),
                )?
            }
        };
        for note in &reply.notes {
            state.memory.add_note(speaker, note.clone());
        }
        let decision = reply.decision.unwrap_or(Decision::None);
        if speaker == Role::Avatar && decision == Decision::Ignore {
            break;
        }
        let actions = valid_actions(env, &reply.actions, &tag, journal);
        let turn = Turn {
            seq: state.next_turn_seq(),
            round,
            clock: state.clock,
            speaker,
            text: reply.text,
            decision,
            ratings: reply.ratings,
            actions,
            activity: activity.clone(),
            scenario_id: scenario_id.clone(),
        };
        if !turn.actions.is_empty() {
            let next = apply_actions(env, &state.environment, &turn.actions)?;
            let diff: Vec<Value> = state_diff(&state.environment, &next)
                .into_iter()
                .map(|(device, attribute, before, after)| {
                    json!({"device": device, "attribute": attribute, "before": before, "after": after})
                })
                .collect();
            journal.env_states.push(json!({
                "turn_seq": turn.seq,
                "clock": state.clock,
                "actions": turn.actions,
                "diff": diff,
            }));
            state.environment = next;
        }
        state.memory.append_shared(turn.seq)?;
        state.transcript.push(turn);
        spoken += 1;
        match speaker {
            Role::Assistant => heard_both.0 = true,
            Role::Avatar => heard_both.1 = true,
        }
        if speaker == Role::Avatar
            && spoken > 1
            && matches!(decision, Decision::Accept | Decision::Reject)
        {
            break;
        }
        if policy.turn_mode == TurnMode::SingleTurn && heard_both.0 && heard_both.1 {
            break;
        }
        speaker = match speaker {
            Role::Assistant => Role::Avatar,
            Role::Avatar => Role::Assistant,
        };
    }
    state.round_index = round;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterviewAnswer {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ratings: BTreeMap<String, i64>,
}

/// Asks the avatar every question of `phase`, in order.
pub fn run_interview(
    phase: InterviewPhase,
    state: &mut SimulationState,
    study: &StudyConfig,
    env: &EnvironmentConfig,
    profile: &AvatarProfile,
    avatar: &Caller<'_>,
    journal: &mut Journal,
) -> Result<Vec<InterviewAnswer>> {
    let questions = study.interview_questions(phase);
    if questions.is_empty() {
        return Err(Error::Precondition(format!(
            "no {} interview questions",
            phase.as_str()
        )));
    }
    let mut out = Vec::with_capacity(questions.len());
    for (index, question) in questions.iter().enumerate() {
        let tag = format!(
            "{}/interview/{}/q{}",
            state.subject_id,
            phase.as_str(),
            index + 1
        );
        let ctx = PromptContext {
            role: Role::Avatar,
            purpose: Purpose::Interview {
                phase,
                index,
                question,
            },
            profile,
            environment: env,
        };
        let messages = build_prompt(&ctx, state, study);
        let required = question
            .metric
            .as_deref()
            .map(|m| required_rating_keys(study, m))
            .unwrap_or_default();
        let reply = avatar.call_parsed(journal, &tag, messages, |raw| {
            let reply = parse_reply(raw);
            let ratings = check_ratings(study, &required, &reply.ratings)?;
            if reply.text.is_empty() {
                return Err("empty answer".into());
            }
            Ok(Reply { ratings, ..reply })
        })?;
        for note in &reply.notes {
            state.memory.add_note(Role::Avatar, note.clone());
        }
        let answer = InterviewAnswer {
            question: question.text.clone(),
            metric: question.metric.clone(),
            answer: reply.text,
            ratings: reply.ratings,
        };
        journal.record(
            EventKind::Interview,
            json!({"tag": tag, "phase": phase, "answer": answer}),
        );
        out.push(answer);
    }
    Ok(out)
}
