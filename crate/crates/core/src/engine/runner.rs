use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::json;

use super::{
    enrich_activity, generate_next_activity, mid_interview_round, run_interaction_round,
    run_interview, Caller, InterviewAnswer, Journal, SimulationState,
};
use crate::config::{InterviewPhase, Phase, StudyConfig};
use crate::context::{
    init_environment, narrative_request, AvatarProfile, EnvironmentConfig, Role, RNG_ALGORITHM,
};
use crate::error::{Error, Result};
use crate::provider::{ChatProvider, RetryPolicy};
use crate::trace::{
    self, sha256_hex, write_json, Durability, EventKind, RunManifest, StreamWriter, SubjectEntry,
    SubjectStatus, TraceEvent, ENGINE_VERSION,
};

pub struct StudyProviders<'a> {
    pub assistant: &'a dyn ChatProvider,
    /// Also writes persona narratives, schedules and enrichments.
    pub avatar: &'a dyn ChatProvider,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    /// Parent of the run directory.
    pub out_root: PathBuf,
    /// Overrides the per-provider default retry policy.
    pub retry: Option<RetryPolicy>,
    pub jobs: usize,
    pub durability: Durability,
}

impl RunOptions {
    pub fn new(out_root: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            seed,
            out_root: out_root.into(),
            retry: None,
            jobs: 1,
            durability: Durability::Sync,
        }
    }
}

/// Everything one subject's run produced, including partial output on failure.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub profile: AvatarProfile,
    pub state: SimulationState,
    pub journal: Journal,
    pub interviews: BTreeMap<InterviewPhase, Vec<InterviewAnswer>>,
    pub status: SubjectStatus,
    pub error: Option<String>,
    /// Set when the run stopped on a provider failure.
    pub provider_failure: bool,
}

fn caller<'a>(provider: &'a dyn ChatProvider, role: Role, opts: &RunOptions) -> Caller<'a> {
    let c = Caller::new(provider, role);
    match &opts.retry {
        Some(p) => c.with_policy(p.clone()),
        None => c,
    }
}

fn run_phases(
    rec: &mut SubjectRecord,
    study: &StudyConfig,
    env: &EnvironmentConfig,
    assistant: &Caller<'_>,
    avatar: &Caller<'_>,
) -> Result<()> {
    if rec.profile.narrative.is_empty() {
        let req = narrative_request(&rec.profile, &avatar.provider.identity().model_id);
        let tag = req.request_tag.clone();
        let reply = avatar.call(&mut rec.journal, &tag, req.messages)?;
        rec.profile.narrative = reply.response.text.trim().to_string();
        rec.journal.record(
            EventKind::Narrative,
            json!({"subject_id": rec.profile.subject_id, "attempts": reply.attempts, "retries": reply.retries(), "text": rec.profile.narrative}),
        );
    }
    let profile = rec.profile.clone();
    let mid = study.policy.phases.contains(&Phase::MidInterview);
    for phase in &study.policy.phases {
        rec.state.phase = *phase;
        match phase {
            Phase::PreInterview | Phase::PostInterview => {
                let ip = phase.interview().expect("interview phase");
                let answers = run_interview(
                    ip,
                    &mut rec.state,
                    study,
                    env,
                    &profile,
                    avatar,
                    &mut rec.journal,
                )?;
                rec.interviews.insert(ip, answers);
            }
            // Runs inside the simulation loop.
            Phase::MidInterview => {}
            Phase::Simulation => {
                for round in 1..=study.policy.max_rounds {
                    generate_next_activity(
                        &mut rec.state,
                        &profile,
                        env,
                        study,
                        avatar,
                        &mut rec.journal,
                    )?;
                    enrich_activity(
                        &mut rec.state,
                        &profile,
                        env,
                        study,
                        avatar,
                        &mut rec.journal,
                    )?;
                    run_interaction_round(
                        &mut rec.state,
                        study,
                        env,
                        &profile,
                        assistant,
                        avatar,
                        &mut rec.journal,
                    )?;
                    if mid && round == mid_interview_round(study) {
                        rec.state.phase = Phase::MidInterview;
                        let answers = run_interview(
                            InterviewPhase::Mid,
                            &mut rec.state,
                            study,
                            env,
                            &profile,
                            avatar,
                            &mut rec.journal,
                        )?;
                        rec.interviews.insert(InterviewPhase::Mid, answers);
                        rec.state.phase = Phase::Simulation;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Runs every phase for one subject. Never fails: errors end the run early and
/// are recorded in the returned status.
pub fn run_subject(
    study: &StudyConfig,
    profile: &AvatarProfile,
    env: &EnvironmentConfig,
    providers: &StudyProviders<'_>,
    opts: &RunOptions,
) -> SubjectRecord {
    let assistant = caller(providers.assistant, Role::Assistant, opts);
    let avatar = caller(providers.avatar, Role::Avatar, opts);
    let mut rec = SubjectRecord {
        profile: profile.clone(),
        state: SimulationState::new(&profile.subject_id, env),
        journal: Journal::new(),
        interviews: BTreeMap::new(),
        status: SubjectStatus::Complete,
        error: None,
        provider_failure: false,
    };
    if let Err(e) = run_phases(&mut rec, study, env, &assistant, &avatar) {
        log::warn!("subject {} stopped: {e}", profile.subject_id);
        let produced = !rec.state.schedule.is_empty() || !rec.interviews.is_empty();
        rec.status = if produced {
            SubjectStatus::Partial
        } else {
            SubjectStatus::Failed
        };
        rec.provider_failure = matches!(e, Error::Provider(_));
        rec.error = Some(e.to_string());
    }
    rec
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub subjects: Vec<SubjectRecord>,
}

impl RunOutcome {
    /// True when no subject completed and every failure came from a provider.
    pub fn all_failed_on_provider(&self) -> bool {
        !self.subjects.is_empty()
            && self
                .subjects
                .iter()
                .all(|s| s.status != SubjectStatus::Complete && s.provider_failure)
    }
}

fn write_stream<T: Serialize>(
    dir: &Path,
    name: &str,
    kind: impl Fn(&T) -> EventKind,
    items: impl IntoIterator<Item = T>,
    durability: Durability,
) -> Result<u64> {
    let mut w =
        StreamWriter::create(&dir.join(format!("{name}.jsonl")), name)?.with_durability(durability);
    for (i, item) in items.into_iter().enumerate() {
        w.append(&TraceEvent::new(i as u64 + 1, kind(&item), &item))?;
    }
    Ok(w.last_seq())
}

fn persist_subject(
    dir: &Path,
    rec: &SubjectRecord,
    durability: Durability,
) -> Result<BTreeMap<String, u64>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut counts = BTreeMap::new();
    let s = &rec.state;
    counts.insert(
        trace::SCHEDULE.into(),
        write_stream(
            dir,
            trace::SCHEDULE,
            |_| EventKind::Schedule,
            &s.schedule,
            durability,
        )?,
    );
    counts.insert(
        trace::ENRICHED.into(),
        write_stream(
            dir,
            trace::ENRICHED,
            |_| EventKind::Enrichment,
            &s.enriched,
            durability,
        )?,
    );
    counts.insert(
        trace::TRANSCRIPT.into(),
        write_stream(
            dir,
            trace::TRANSCRIPT,
            |_| EventKind::Turn,
            &s.transcript,
            durability,
        )?,
    );
    counts.insert(
        trace::ENV_STATES.into(),
        write_stream(
            dir,
            trace::ENV_STATES,
            |_| EventKind::StateDiff,
            &rec.journal.env_states,
            durability,
        )?,
    );
    let mut w = StreamWriter::create(&dir.join(format!("{}.jsonl", trace::EVENTS)), trace::EVENTS)?
        .with_durability(durability);
    for (i, (kind, payload)) in rec.journal.events.iter().enumerate() {
        w.append(&TraceEvent {
            seq: i as u64 + 1,
            kind: *kind,
            payload: payload.clone(),
        })?;
    }
    counts.insert(trace::EVENTS.into(), w.last_seq());
    write_json(&dir.join("interviews.json"), &rec.interviews)?;
    Ok(counts)
}

/// `<study>-seed<seed>-<first 8 hex of a digest over every input>`.
pub fn run_id(
    study: &StudyConfig,
    profiles: &[AvatarProfile],
    env: &EnvironmentConfig,
    providers: &StudyProviders<'_>,
    seed: u64,
) -> String {
    let material = json!({
        "config": study,
        "profiles": profiles,
        "environment": env,
        "assistant": providers.assistant.identity(),
        "avatar": providers.avatar.identity(),
        "seed": seed,
    });
    let digest = sha256_hex(material.to_string().as_bytes());
    format!("{}-seed{seed}-{}", study.study_id, &digest[..8])
}

/// Runs every subject and writes the run directory under `opts.out_root`.
pub fn run_study(
    study: &StudyConfig,
    profiles: &[AvatarProfile],
    env: &EnvironmentConfig,
    providers: &StudyProviders<'_>,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let violations = crate::config::validate_config(study);
    if let Some(v) = violations.first() {
        return Err(Error::schema(v.field.clone(), v.rule.clone()));
    }
    env.validate()?;
    if profiles.is_empty() {
        return Err(Error::Precondition(
            "at least one profile is required".into(),
        ));
    }
    let id = run_id(study, profiles, env, providers, opts.seed);
    let dir = opts.out_root.join(&id);
    if dir.exists() {
        return Err(Error::Precondition(format!(
            "run directory {} already exists",
            dir.display()
        )));
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SubjectRecord>>> = Mutex::new(vec![None; profiles.len()]);
    let jobs = opts.jobs.clamp(1, profiles.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(profile) = profiles.get(i) else {
                    break;
                };
                let rec = run_subject(study, profile, env, providers, opts);
                slots.lock().expect("subject slots poisoned")[i] = Some(rec);
            });
        }
    });
    let subjects: Vec<SubjectRecord> = slots
        .into_inner()
        .expect("subject slots poisoned")
        .into_iter()
        .map(|r| r.expect("every subject ran"))
        .collect();

    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config_text = study.to_canonical_json();
    trace::write_bytes(&dir.join(trace::CONFIG_FILE), config_text.as_bytes())?;
    write_json(
        &dir.join("environment.json"),
        &json!({"config": env, "initial_state": init_environment(env)}),
    )?;
    let final_profiles: Vec<&AvatarProfile> = subjects.iter().map(|s| &s.profile).collect();
    write_json(&dir.join("profiles.json"), &final_profiles)?;

    let mut entries = BTreeMap::new();
    for rec in &subjects {
        let counts = persist_subject(&dir.join(&rec.profile.subject_id), rec, opts.durability)?;
        entries.insert(
            rec.profile.subject_id.clone(),
            SubjectEntry {
                status: rec.status,
                error: rec.error.clone(),
                streams: counts,
            },
        );
    }
    let manifest = RunManifest {
        run_id: id,
        study_id: study.study_id.clone(),
        config_hash: sha256_hex(config_text.as_bytes()),
        seed: opts.seed,
        providers: [
            (
                "assistant".to_string(),
                providers.assistant.identity().clone(),
            ),
            ("avatar".to_string(), providers.avatar.identity().clone()),
        ]
        .into(),
        engine_version: ENGINE_VERSION.into(),
        rng_algorithm: RNG_ALGORITHM.into(),
        subjects: entries,
    };
    write_json(&dir.join(trace::MANIFEST_FILE), &manifest)?;
    Ok(RunOutcome {
        dir,
        manifest,
        subjects,
    })
}
