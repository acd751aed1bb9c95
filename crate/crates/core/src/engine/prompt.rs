//! Prompt assembly for both roles.
//!
//! The assistant sees the study metadata; the avatar sees its persona. Each
//! side's privileged material is also scrubbed from the other side's prompts
//! after assembly, since shared text (transcript, narratives) is model output.

use crate::config::{InterviewPhase, InterviewQuestion, StudyConfig};
use crate::context::{AvatarProfile, EnvironmentConfig, EnvironmentState, Role};
use crate::prompts::numbered;
use crate::provider::ChatMessage;

use super::{parse::required_rating_keys, SimulationState, Turn};

/// Number of most recent turns replayed as conversation history.
pub const HISTORY_WINDOW: usize = 12;

const AVATAR_SYSTEM: &str = "You are role-playing a participant in a smart home study. Speak as the person \
described below, stay consistent with their background, habits and earlier exchanges, and finish every reply \
with the directive lines you are asked for.";

const SCHEDULE_SYSTEM: &str =
    "You generate realistic daily activities for a simulated smart home resident.";

const ENRICH_SYSTEM: &str =
    "You are a simulation engine that expands a scheduled activity in a smart home into \
a detailed sequence of micro-actions. Each action follows logically from the previous one.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Purpose<'a> {
    /// A turn inside a simulation round.
    Turn,
    Interview {
        phase: InterviewPhase,
        index: usize,
        question: &'a InterviewQuestion,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub role: Role,
    pub purpose: Purpose<'a>,
    pub profile: &'a AvatarProfile,
    pub environment: &'a EnvironmentConfig,
}

/// Removes every occurrence of every forbidden string, repeating until none
/// is left (a removal can join two fragments into a new occurrence).
pub fn redact(text: &str, forbidden: &[&str]) -> String {
    let mut out = text.to_string();
    loop {
        let mut changed = false;
        for f in forbidden.iter().filter(|f| !f.is_empty()) {
            if out.contains(*f) {
                out = out.replace(*f, "");
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

fn redact_messages(messages: Vec<ChatMessage>, forbidden: &[&str]) -> Vec<ChatMessage> {
    messages
        .into_iter()
        .map(|m| ChatMessage {
            content: redact(&m.content, forbidden),
            ..m
        })
        .collect()
}

/// Strings that must never reach an assistant prompt.
fn assistant_forbidden(state: &SimulationState) -> Vec<&str> {
    state
        .memory
        .notes(Role::Avatar)
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect()
}

fn device_states(env: &EnvironmentState) -> String {
    env.devices
        .iter()
        .map(|(name, attrs)| {
            let attrs = attrs
                .iter()
                .map(|(k, v)| match v {
                    serde_json::Value::String(s) => format!("{k}={s}"),
                    other => format!("{k}={other}"),
                })
                .collect::<Vec<_>>()
                .join(", ");
            format!("  {name}: {attrs}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn history(turns: &[Turn]) -> String {
    let start = turns.len().saturating_sub(HISTORY_WINDOW);
    let lines: Vec<String> = turns[start..]
        .iter()
        .map(|t| {
            let who = match t.speaker {
                Role::Assistant => "Assistant Agent",
                Role::Avatar => "Avatar",
            };
            format!("{who}: \"{}\"", t.text)
        })
        .collect();
    if lines.is_empty() {
        "(no conversation yet)".into()
    } else {
        lines.join("\n")
    }
}

fn activity_block(state: &SimulationState) -> String {
    let prev = state
        .previous_activity()
        .map_or_else(|| "none".to_string(), |e| e.describe());
    let cur = state
        .current_activity()
        .map_or_else(|| "none".to_string(), |e| e.describe());
    format!("Previous:\n{prev}\n\nCurrent:\n{cur}")
}

fn current_round_turns(state: &SimulationState) -> impl Iterator<Item = &Turn> {
    let round = state.round_index + 1;
    state.transcript.iter().filter(move |t| t.round == round)
}

fn rating_lines(study: &StudyConfig, metric_ids: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for id in metric_ids {
        let Some(m) = study.metric(id) else { continue };
        let Some((lo, hi)) = m.rating_bounds() else {
            continue;
        };
        let label = m.label.as_deref().unwrap_or(&m.metric_id);
        for key in required_rating_keys(study, id) {
            out.push(format!(
                "RATING[{key}]: a whole number from {lo} to {hi} ({label})"
            ));
        }
    }
    out
}

/// Metrics rated on every avatar turn inside a round.
pub(crate) fn per_turn_metrics(study: &StudyConfig) -> Vec<&str> {
    study
        .metrics
        .iter()
        .filter(|m| m.collected_per_turn())
        .map(|m| m.metric_id.as_str())
        .collect()
}

/// Whether the next turn in the current round opens it.
fn opening(state: &SimulationState) -> bool {
    current_round_turns(state).next().is_none()
}

/// Scenario the assistant enacts this round under scripted initiation.
pub(crate) fn round_scenario<'s>(
    study: &'s StudyConfig,
    state: &SimulationState,
) -> Option<&'s crate::config::ScenarioSpec> {
    if study.policy.initiation != crate::config::Initiation::Scripted || study.scenarios.is_empty()
    {
        return None;
    }
    Some(&study.scenarios[state.round_index as usize % study.scenarios.len()])
}

fn assistant_prompt(
    ctx: &PromptContext<'_>,
    state: &SimulationState,
    study: &StudyConfig,
) -> Vec<ChatMessage> {
    let mut system = format!(
        "{}\n\nStudy objective: {}\n\n",
        study.assistant_role, study.objective
    );
    system.push_str(&format!(
        "Research questions:\n{}\n\n",
        numbered(&study.research_questions)
    ));
    if !study.scenarios.is_empty() {
        system.push_str("Scenarios:\n");
        for s in &study.scenarios {
            system.push_str(&format!("- {}: {}", s.scenario_id, s.narrative));
            if let Some(h) = &s.trigger_hint {
                system.push_str(&format!(" (cue: {h})"));
            }
            system.push('\n');
        }
        system.push('\n');
    }
    system.push_str(
        "Reply with exactly what you say to the user. To operate a listed device, add a line\n\
ACTION: device|action|value\n\
using only the devices and actions listed in the environment.",
    );

    let mut user = format!(
        "Previous and Current Activity:\n{}\n\n",
        activity_block(state)
    );
    user.push_str(&format!("Environment:\n{}", ctx.environment.describe()));
    user.push_str(&format!(
        "Device states:\n{}\n\n",
        device_states(&state.environment)
    ));
    user.push_str(&format!(
        "Conversation History:\n{}\n\n",
        history(&state.transcript)
    ));
    let notes = state.memory.notes(Role::Assistant);
    if !notes.is_empty() {
        user.push_str(&format!("Your notes:\n- {}\n\n", notes.join("\n- ")));
    }
    let task = if opening(state) {
        match round_scenario(study, state) {
            Some(s) => format!(
                "Enact scenario {} now, adapted to the user's current activity: {}",
                s.scenario_id, s.narrative
            ),
            None => "Decide how to engage the user now, given their current activity.".to_string(),
        }
    } else {
        "Respond to the user's last message.".to_string()
    };
    user.push_str(&task);
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

fn avatar_prompt(
    ctx: &PromptContext<'_>,
    state: &SimulationState,
    study: &StudyConfig,
) -> Vec<ChatMessage> {
    let mut user = format!(
        "You are the subject described by this profile:\n{}\n",
        ctx.profile.describe()
    );
    user.push_str(&format!(
        "Your environment:\n{}",
        ctx.environment.describe()
    ));
    user.push_str(&format!(
        "Device states:\n{}\n\n",
        device_states(&state.environment)
    ));
    user.push_str(&format!("Your task:\n{}\n\n", study.avatar_role));
    user.push_str(&format!("Activities:\n{}\n\n", activity_block(state)));
    if let Some(e) = state.current_enrichment() {
        user.push_str(&format!(
            "Detailed Current Activity Description:\n{}\n\n",
            e.expanded
        ));
    }
    user.push_str(&format!(
        "Conversation History:\n{}\n\n",
        history(&state.transcript)
    ));
    let notes = state.memory.notes(Role::Avatar);
    if !notes.is_empty() {
        user.push_str(&format!(
            "Your private notes:\n- {}\n\n",
            notes.join("\n- ")
        ));
    }
    let mut directives: Vec<String> = Vec::new();
    match ctx.purpose {
        Purpose::Turn if opening(state) => {
            user.push_str(
                "Speak to the assistant about what you need right now, in character.\n\n",
            );
            directives.push("DECISION: none".into());
        }
        Purpose::Turn => {
            user.push_str("The assistant just spoke to you. Reply in character.\n\n");
            directives
                .push("DECISION: accept, reject, ignore or none (none = you keep talking)".into());
            directives.extend(rating_lines(study, &per_turn_metrics(study)));
        }
        Purpose::Interview {
            phase,
            index,
            question,
        } => {
            user.push_str(&format!(
                "Interview ({} study), question {}:\n{}\nAnswer in character in a few sentences.\n\n",
                phase.as_str(),
                index + 1,
                question.text
            ));
            if let Some(m) = &question.metric {
                directives.extend(rating_lines(study, &[m.as_str()]));
            }
        }
    }
    if !directives.is_empty() {
        user.push_str("After your reply add these lines:\n");
        user.push_str(&directives.join("\n"));
        user.push_str("\n\n");
    }
    user.push_str(
        "Optional lines:\nACTION: device|action|value (for a device you operate yourself)\n\
NOTE: a private thought the assistant will never see",
    );
    vec![ChatMessage::system(AVATAR_SYSTEM), ChatMessage::user(user)]
}

/// Messages for one role's next utterance. Pure in its inputs.
pub fn build_prompt(
    ctx: &PromptContext<'_>,
    state: &SimulationState,
    study: &StudyConfig,
) -> Vec<ChatMessage> {
    match ctx.role {
        Role::Assistant => redact_messages(
            assistant_prompt(ctx, state, study),
            &assistant_forbidden(state),
        ),
        Role::Avatar => redact_messages(
            avatar_prompt(ctx, state, study),
            &study.avatar_forbidden_strings(),
        ),
    }
}

/// Next-activity prompt. Persona-side, so scrubbed like avatar prompts.
pub fn schedule_messages(
    profile: &AvatarProfile,
    env: &EnvironmentConfig,
    state: &SimulationState,
    study: &StudyConfig,
) -> Vec<ChatMessage> {
    let v = &env.vocabulary;
    let mut user = format!(
        "You are the subject described by the provided profile.\n\n{}\n",
        profile.describe()
    );
    user.push_str("You are going through your day in a smart home.\n\n");
    user.push_str(
        "Instructions:\n\
1. Generate the next activity, choosing from the Actions, Objects, Modifiers and Locations.\n\
2. Keep it logically connected to the previous activities.\n\
3. Stay consistent with the persona.\n\
4. Start_time must not be earlier than the end of the last activity.\n\
5. The reasoning reflects the subject's personality and motivation.\n\n",
    );
    user.push_str(&format!("Locations: {}.\n", env.zones.join(", ")));
    user.push_str(&format!("Actions: {}.\n", v.actions.join(", ")));
    user.push_str(&format!("Objects: {}.\n", v.objects.join(", ")));
    user.push_str(&format!("Modifiers: {}.\n\n", v.modifiers.join(", ")));
    let start = state.schedule.len().saturating_sub(3);
    let previous: Vec<String> = state.schedule[start..]
        .iter()
        .map(|e| e.describe())
        .collect();
    user.push_str(&format!(
        "Previous Activities:\n{}\n\n",
        if previous.is_empty() {
            "none, this is the first activity".into()
        } else {
            previous.join("\n\n")
        }
    ));
    user.push_str(
        "Output the next activity only, as a single JSON object:\n\
{\"Start_time\": \"...\", \"Activity\": \"...\", \"End_time\": \"...\", \"Reasoning\": \"...\"}\n\
Times use the 12-hour format, for example \"2025-02-06 11:48:48 pm\".\n\
Output valid JSON only, without markdown.",
    );
    let messages = vec![
        ChatMessage::system(SCHEDULE_SYSTEM),
        ChatMessage::user(user),
    ];
    redact_messages(messages, &study.avatar_forbidden_strings())
}

/// Enrichment prompt for the current activity.
pub fn enrichment_messages(
    profile: &AvatarProfile,
    env: &EnvironmentConfig,
    state: &SimulationState,
    study: &StudyConfig,
) -> Vec<ChatMessage> {
    let mut user = format!("Subject Profile:\n{}\n", profile.describe());
    user.push_str(&format!("Activities:\n{}\n\n", activity_block(state)));
    user.push_str(&format!("Environment Details:\n{}\n", env.describe()));
    if !study.scenarios.is_empty() {
        user.push_str("Example Scenarios:\n");
        for s in &study.scenarios {
            user.push_str(&format!("- {}\n", s.narrative));
        }
        user.push('\n');
    }
    user.push_str(
        "Expand the current activity covering:\n\
1. Thoughts and reactions: inner thoughts, decisions and mood.\n\
2. Movement and actions: how the subject handles objects and moves around.\n\
3. Smart home environment: interactions with the surroundings, without describing what the assistant does.\n\n\
Output one JSON object with exactly the keys \"time_stamp\" and \"Expanded Activity\". \
Use the 12-hour format for time_stamp, for example \"2025-02-06 11:48:48 pm\". Output valid JSON only.",
    );
    let messages = vec![ChatMessage::system(ENRICH_SYSTEM), ChatMessage::user(user)];
    redact_messages(messages, &study.avatar_forbidden_strings())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redaction_reaches_fixpoint() {
        assert_eq!(redact("aXYb", &["XY"]), "ab");
        // Removing "mid" joins "se" + "cret" into a new occurrence.
        assert_eq!(redact("semidcret!", &["mid", "secret"]), "!");
        assert_eq!(redact("keep", &[""]), "keep");
    }
}
