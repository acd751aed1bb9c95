//! Study configuration ("interaction knowledge").
//!
//! A [`StudyConfig`] is the machine-readable description of one study:
//! objective, research questions, scenarios, roles, interview phases, the
//! interaction policy and the metrics collected. It is loaded from UTF-8 JSON;
//! unknown keys are rejected and every invariant is checked on load.
//!
//! The field set is a reconstruction distilled from how replicated studies are
//! described (objective, research questions, scenario narratives, interview
//! questions, role instructions). `schema_version` gates future changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    Personalization,
    Proactivity,
    Interruptibility,
    UserControl,
}

impl Theme {
    pub const ALL: [Theme; 4] = [
        Theme::Personalization,
        Theme::Proactivity,
        Theme::Interruptibility,
        Theme::UserControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Theme::Personalization => "personalization",
            Theme::Proactivity => "proactivity",
            Theme::Interruptibility => "interruptibility",
            Theme::UserControl => "user_control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Woz,
    Storyboard,
    Interview,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Woz => "woz",
            Mode::Storyboard => "storyboard",
            Mode::Interview => "interview",
        }
    }
}

impl fmt::Display for Theme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Theme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Theme::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown theme `{s}`")))
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Mode::Woz, Mode::Storyboard, Mode::Interview]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown mode `{s}`")))
    }
}

/// Keys of the `interviews` mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterviewPhase {
    Pre,
    Mid,
    Post,
}

impl InterviewPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            InterviewPhase::Pre => "pre",
            InterviewPhase::Mid => "mid",
            InterviewPhase::Post => "post",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreInterview,
    MidInterview,
    Simulation,
    PostInterview,
}

impl Phase {
    pub fn interview(self) -> Option<InterviewPhase> {
        match self {
            Phase::PreInterview => Some(InterviewPhase::Pre),
            Phase::MidInterview => Some(InterviewPhase::Mid),
            Phase::PostInterview => Some(InterviewPhase::Post),
            Phase::Simulation => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnMode {
    SingleTurn,
    MultiTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initiation {
    AssistantProactive,
    AvatarInitiated,
    /// The assistant enacts the configured scenarios one per round, in order.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario_id: String,
    pub narrative: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionPolicy {
    pub turn_mode: TurnMode,
    pub max_rounds: u32,
    pub max_turns_per_round: u32,
    pub phases: Vec<Phase>,
    pub initiation: Initiation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Likert,
    Ranking,
    Rate,
    Distribution,
    TraitRating,
    Availability,
}

impl MetricKind {
    pub fn uses_scale(self) -> bool {
        matches!(
            self,
            MetricKind::Likert | MetricKind::TraitRating | MetricKind::Availability
        )
    }

    pub fn uses_categories(self) -> bool {
        matches!(
            self,
            MetricKind::Rate | MetricKind::Distribution | MetricKind::Ranking
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub metric_id: String,
    pub kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_min: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_max: Option<i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    /// Short instruction shown to avatars when the rating is requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Researcher-facing scoring rubric. Never shown to avatars.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<String>,
    /// Published values from the original study, keyed by category/item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<BTreeMap<String, f64>>,
}

impl MetricSpec {
    /// Items that receive one rating each. Scalar metrics have none.
    pub fn rated_items(&self) -> Vec<String> {
        match self.kind {
            MetricKind::Ranking => self.categories.clone(),
            MetricKind::TraitRating if self.categories.is_empty() => crate::context::TipiTrait::ALL
                .iter()
                .map(|t| t.key().to_string())
                .collect(),
            MetricKind::TraitRating => self.categories.clone(),
            _ => Vec::new(),
        }
    }

    /// Inclusive bounds accepted for a rating of this metric.
    pub fn rating_bounds(&self) -> Option<(i64, i64)> {
        match self.kind {
            MetricKind::Ranking => Some((1, self.categories.len() as i64)),
            k if k.uses_scale() => Some((self.scale_min?, self.scale_max?)),
            _ => None,
        }
    }

    /// Whether ratings are collected on avatar turns during simulation rounds.
    pub fn collected_per_turn(&self) -> bool {
        self.kind == MetricKind::Availability
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum QuestionRepr {
    Plain(String),
    Rated(RatedQuestion),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatedQuestion {
    text: String,
    metric: String,
}

/// An interview question, optionally tied to a metric whose rating the
/// answer must carry. Serialized as a bare string when untied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "QuestionRepr", into = "QuestionRepr")]
pub struct InterviewQuestion {
    pub text: String,
    pub metric: Option<String>,
}

impl InterviewQuestion {
    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            metric: None,
        }
    }

    pub fn rated(text: impl Into<String>, metric: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            metric: Some(metric.into()),
        }
    }
}

impl From<QuestionRepr> for InterviewQuestion {
    fn from(r: QuestionRepr) -> Self {
        match r {
            QuestionRepr::Plain(text) => Self { text, metric: None },
            QuestionRepr::Rated(q) => Self {
                text: q.text,
                metric: Some(q.metric),
            },
        }
    }
}

impl From<InterviewQuestion> for QuestionRepr {
    fn from(q: InterviewQuestion) -> Self {
        match q.metric {
            None => QuestionRepr::Plain(q.text),
            Some(metric) => QuestionRepr::Rated(RatedQuestion {
                text: q.text,
                metric,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub schema_version: u32,
    pub study_id: String,
    pub title: String,
    pub theme: Theme,
    pub mode: Mode,
    pub publication_date: NaiveDate,
    pub objective: String,
    pub research_questions: Vec<String>,
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default)]
    pub interviews: BTreeMap<InterviewPhase, Vec<InterviewQuestion>>,
    pub assistant_role: String,
    pub avatar_role: String,
    pub policy: InteractionPolicy,
    #[serde(default)]
    pub metrics: Vec<MetricSpec>,
}

impl StudyConfig {
    pub fn metric(&self, id: &str) -> Option<&MetricSpec> {
        self.metrics.iter().find(|m| m.metric_id == id)
    }

    pub fn interview_questions(&self, phase: InterviewPhase) -> &[InterviewQuestion] {
        self.interviews
            .get(&phase)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Canonical serialization; the bytes hashed into run manifests.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("StudyConfig always serializes")
    }

    /// Strings an avatar must never see.
    pub fn avatar_forbidden_strings(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.research_questions.iter().map(String::as_str).collect();
        out.push(self.assistant_role.as_str());
        out.extend(self.metrics.iter().filter_map(|m| m.rubric.as_deref()));
        out.retain(|s| !s.trim().is_empty());
        out
    }
}

/// A broken invariant: which field, and which rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Lists every broken invariant; empty iff the config is valid.
pub fn validate_config(cfg: &StudyConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if cfg.schema_version != SCHEMA_VERSION {
        out.push(Violation::new(
            "schema_version",
            format!(
                "unsupported version {}, expected {SCHEMA_VERSION}",
                cfg.schema_version
            ),
        ));
    }
    if cfg.study_id.trim().is_empty() {
        out.push(Violation::new("study_id", "must not be empty"));
    }
    if cfg.research_questions.is_empty() {
        out.push(Violation::new(
            "research_questions",
            "must contain at least one question",
        ));
    }
    for (i, rq) in cfg.research_questions.iter().enumerate() {
        if rq.trim().is_empty() {
            out.push(Violation::new(
                format!("research_questions[{i}]"),
                "must not be empty",
            ));
        }
    }
    let mut scenario_ids = BTreeSet::new();
    for (i, s) in cfg.scenarios.iter().enumerate() {
        if s.narrative.trim().is_empty() {
            out.push(Violation::new(
                format!("scenarios[{i}].narrative"),
                "must not be empty",
            ));
        }
        if !scenario_ids.insert(s.scenario_id.as_str()) {
            out.push(Violation::new(
                format!("scenarios[{i}].scenario_id"),
                format!("duplicate id `{}`", s.scenario_id),
            ));
        }
    }
    if cfg.assistant_role.trim().is_empty() {
        out.push(Violation::new("assistant_role", "must not be empty"));
    }
    if cfg.avatar_role.trim().is_empty() {
        out.push(Violation::new("avatar_role", "must not be empty"));
    }

    let policy = &cfg.policy;
    if policy.max_rounds < 1 {
        out.push(Violation::new("policy.max_rounds", "must be >= 1"));
    }
    if policy.max_turns_per_round < 1 {
        out.push(Violation::new("policy.max_turns_per_round", "must be >= 1"));
    }
    let sim_count = policy
        .phases
        .iter()
        .filter(|p| **p == Phase::Simulation)
        .count();
    if sim_count != 1 {
        out.push(Violation::new(
            "policy.phases",
            format!("simulation phase must appear exactly once, found {sim_count}"),
        ));
    }
    let mut seen = BTreeSet::new();
    for phase in &policy.phases {
        if !seen.insert(*phase) && *phase != Phase::Simulation {
            out.push(Violation::new(
                "policy.phases",
                format!("duplicate phase {phase:?}"),
            ));
        }
        if let Some(ip) = phase.interview() {
            if cfg.interview_questions(ip).is_empty() {
                out.push(Violation::new(
                    format!("interviews.{}", ip.as_str()),
                    "phase is listed in policy.phases but has no questions",
                ));
            }
        }
    }

    let mut metric_ids = BTreeSet::new();
    for (i, m) in cfg.metrics.iter().enumerate() {
        let field = |f: &str| format!("metrics[{i}].{f}");
        if !metric_ids.insert(m.metric_id.as_str()) {
            out.push(Violation::new(
                field("metric_id"),
                format!("duplicate id `{}`", m.metric_id),
            ));
        }
        if m.metric_id.contains(['/', '[', ']']) || m.metric_id.trim().is_empty() {
            out.push(Violation::new(
                field("metric_id"),
                "must be non-empty without '/', '[' or ']'",
            ));
        }
        if m.kind.uses_scale() {
            match (m.scale_min, m.scale_max) {
                (Some(lo), Some(hi)) if lo < hi => {}
                (Some(lo), Some(hi)) => out.push(Violation::new(
                    field("scale_min"),
                    format!("scale_min ({lo}) must be < scale_max ({hi})"),
                )),
                _ => out.push(Violation::new(
                    field("scale_min"),
                    "scale_min and scale_max are required",
                )),
            }
        }
        if m.kind.uses_categories() && m.categories.is_empty() {
            out.push(Violation::new(
                field("categories"),
                "must not be empty for this metric kind",
            ));
        }
    }
    for (phase, questions) in &cfg.interviews {
        for (qi, q) in questions.iter().enumerate() {
            let f = format!("interviews.{}[{qi}]", phase.as_str());
            if q.text.trim().is_empty() {
                out.push(Violation::new(f.clone(), "question must not be empty"));
            }
            if let Some(id) = &q.metric {
                match cfg.metric(id) {
                    None => out.push(Violation::new(
                        f,
                        format!("references unknown metric `{id}`"),
                    )),
                    Some(m) if m.rating_bounds().is_none() => out.push(Violation::new(
                        f,
                        format!(
                            "metric `{id}` of kind {:?} cannot be rated in an interview",
                            m.kind
                        ),
                    )),
                    _ => {}
                }
            }
        }
    }
    out
}

fn schema_error_from(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = err.path().to_string();
    let inner = err.into_inner();
    if inner.is_syntax() || inner.is_eof() {
        return Error::Parse(inner.to_string());
    }
    let msg = inner.to_string();
    // serde reports the missing/unknown field name inside the message.
    let named = ["missing field `", "unknown field `"].iter().find_map(|p| {
        msg.split_once(p)
            .and_then(|(_, rest)| rest.split_once('`'))
            .map(|(f, _)| f.to_string())
    });
    let field = match (path.as_str(), named) {
        (".", Some(f)) => f,
        (p, Some(f)) if msg.starts_with("missing") => format!("{p}.{f}"),
        (p, _) => p.to_string(),
    };
    Error::schema(field, msg)
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<StudyConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let cfg: StudyConfig = serde_path_to_error::deserialize(value).map_err(schema_error_from)?;
    let violations = validate_config(&cfg);
    if let Some(first) = violations.first() {
        let rule = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::schema(first.field.clone(), rule));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<StudyConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
