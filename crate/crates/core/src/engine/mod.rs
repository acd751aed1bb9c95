//! The simulation loop: schedule generation, activity enrichment,
//! assistant-avatar interaction rounds, interviews and run persistence.

mod interaction;
pub mod parse;
mod prompt;
mod runner;
mod timestamp;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Phase, StudyConfig};
use crate::context::{
    init_environment, DeviceAction, EnvironmentConfig, EnvironmentState, MemoryState, Role,
};

pub use interaction::{
    enrich_activity, generate_next_activity, run_interaction_round, run_interview, Caller,
    InterviewAnswer, Journal, FORMAT_RETRIES,
};
pub use prompt::{
    build_prompt, enrichment_messages, redact, schedule_messages, PromptContext, Purpose,
    HISTORY_WINDOW,
};
pub use runner::{
    run_id, run_study, run_subject, RunOptions, RunOutcome, StudyProviders, SubjectRecord,
};
pub use timestamp::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    Ignore,
    /// No decision yet; the exchange continues.
    None,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
            Decision::Ignore => "ignore",
            Decision::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub seq: u64,
    pub start_time: Timestamp,
    pub end_time: Timestamp,
    pub activity: String,
    pub reasoning: String,
}

impl ScheduleEntry {
    /// `11:50 am, 12:10 pm`
    pub fn duration_label(&self) -> String {
        format!(
            "{}, {}",
            self.start_time.clock_label(),
            self.end_time.clock_label()
        )
    }

    pub fn describe(&self) -> String {
        format!(
            "Event: {},\nReasoning: \"{}\",\nDuration: {}",
            self.activity,
            self.reasoning,
            self.duration_label()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedActivity {
    pub seq: u64,
    pub time_stamp: Timestamp,
    pub expanded: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub seq: u64,
    pub round: u32,
    /// Logical clock (seconds) at the start of the round's activity.
    pub clock: i64,
    pub speaker: Role,
    pub text: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ratings: BTreeMap<String, i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<DeviceAction>,
    /// The avatar's activity when the turn happened.
    pub activity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
}

/// Everything carried between rounds of one subject's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationState {
    pub subject_id: String,
    pub round_index: u32,
    pub clock: i64,
    pub phase: Phase,
    pub environment: EnvironmentState,
    pub memory: MemoryState,
    pub transcript: Vec<Turn>,
    pub schedule: Vec<ScheduleEntry>,
    pub enriched: Vec<EnrichedActivity>,
}

impl SimulationState {
    pub fn new(subject_id: impl Into<String>, env: &EnvironmentConfig) -> Self {
        Self {
            subject_id: subject_id.into(),
            round_index: 0,
            clock: 0,
            phase: Phase::Simulation,
            environment: init_environment(env),
            memory: MemoryState::new(),
            transcript: Vec::new(),
            schedule: Vec::new(),
            enriched: Vec::new(),
        }
    }

    pub fn current_activity(&self) -> Option<&ScheduleEntry> {
        self.schedule.last()
    }

    pub fn previous_activity(&self) -> Option<&ScheduleEntry> {
        self.schedule
            .len()
            .checked_sub(2)
            .map(|i| &self.schedule[i])
    }

    pub fn current_enrichment(&self) -> Option<&EnrichedActivity> {
        self.enriched.last()
    }

    pub fn next_turn_seq(&self) -> u64 {
        self.transcript.last().map_or(1, |t| t.seq + 1)
    }
}

/// The round after which the mid-study interview runs.
pub fn mid_interview_round(study: &StudyConfig) -> u32 {
    study.policy.max_rounds.div_ceil(2)
}
