//! Semantic-similarity scoring of simulated findings against original ones.
//!
//! Each research question goes through the same path on both sides:
//! summarize, revise into general points, embed, and compare by cosine.
//! Revised summaries are what gets embedded.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, StudyConfig, Theme};
use crate::error::{Error, Result};
use crate::metrics::{cosine_similarity, mean};
use crate::prompts::{fill, numbered, EVALUATION_SYSTEM, REVISION_TEMPLATE, SUMMARY_TEMPLATE};
use crate::provider::{
    chat_with_retry, embed_with_retry, ChatMessage, ChatProvider, ChatRequest, Embedder,
    RetryPolicy, EVALUATION_TEMPERATURE,
};
use crate::trace::{self, LoadedRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Simulated,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Simulated => "simulated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingsDoc {
    pub study_id: String,
    /// 1-based.
    pub rq_index: usize,
    pub source: Source,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_summary: Option<String>,
}

impl FindingsDoc {
    pub fn new(
        study_id: impl Into<String>,
        rq_index: usize,
        source: Source,
        raw_text: impl Into<String>,
    ) -> Self {
        Self {
            study_id: study_id.into(),
            rq_index,
            source,
            raw_text: raw_text.into(),
            summary: None,
            revised_summary: None,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.summary.is_some() || self.revised_summary.is_none()
    }

    fn tag(&self, step: &str) -> String {
        format!(
            "{step}/{}/rq{}/{}",
            self.study_id,
            self.rq_index,
            self.source.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RQResult {
    pub study_id: String,
    pub rq_index: usize,
    pub similarity: f64,
    pub theme: Theme,
    pub mode: Mode,
}

fn evaluation_request(model_id: &str, tag: String, prompt: String) -> ChatRequest {
    ChatRequest::new(
        model_id,
        tag,
        vec![
            ChatMessage::system(EVALUATION_SYSTEM),
            ChatMessage::user(prompt),
        ],
    )
    .with_temperature(EVALUATION_TEMPERATURE)
}

fn nonempty(text: &str, what: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Precondition(format!("{what} is empty")));
    }
    Ok(())
}

/// The summarization request for `doc`, without sending it.
pub fn summary_request(doc: &FindingsDoc, rqs: &[String], model_id: &str) -> Result<ChatRequest> {
    nonempty(&doc.raw_text, "findings text")?;
    let prompt = fill(
        SUMMARY_TEMPLATE,
        &[
            ("Research Questions", &numbered(rqs)),
            ("Activities and Conversations", &doc.raw_text),
        ],
    )?;
    Ok(evaluation_request(model_id, doc.tag("summarize"), prompt))
}

/// One stateless call per document; nothing is carried between calls.
pub fn summarize_for_rq(
    doc: &FindingsDoc,
    rqs: &[String],
    provider: &dyn ChatProvider,
    policy: &RetryPolicy,
) -> Result<String> {
    let req = summary_request(doc, rqs, &provider.identity().model_id)?;
    Ok(chat_with_retry(provider, &req, policy)?.response.text)
}

pub fn revision_request(
    summary: &str,
    tag: impl Into<String>,
    model_id: &str,
) -> Result<ChatRequest> {
    nonempty(summary, "summary")?;
    let prompt = fill(REVISION_TEMPLATE, &[("Summary", summary)])?;
    Ok(evaluation_request(model_id, tag.into(), prompt))
}

pub fn revise_summary(
    summary: &str,
    tag: &str,
    provider: &dyn ChatProvider,
    policy: &RetryPolicy,
) -> Result<String> {
    let req = revision_request(summary, tag, &provider.identity().model_id)?;
    Ok(chat_with_retry(provider, &req, policy)?.response.text)
}

/// Cosine similarity of the two revised texts' embeddings.
pub fn score_rq(
    study: &StudyConfig,
    rq_index: usize,
    original_revised: &str,
    simulated_revised: &str,
    embedder: &dyn Embedder,
    policy: &RetryPolicy,
) -> Result<RQResult> {
    nonempty(original_revised, "original summary")?;
    nonempty(simulated_revised, "simulated summary")?;
    let v = embed_with_retry(
        embedder,
        &[original_revised.to_string(), simulated_revised.to_string()],
        policy,
    )?;
    Ok(RQResult {
        study_id: study.study_id.clone(),
        rq_index,
        similarity: cosine_similarity(&v[0], &v[1])?,
        theme: study.theme,
        mode: study.mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Study,
    Theme,
    Mode,
    All,
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupBy::Study => "study",
            GroupBy::Theme => "theme",
            GroupBy::Mode => "mode",
            GroupBy::All => "all",
        })
    }
}

/// Mean similarity per group. The single `All` group is keyed `"all"`.
pub fn aggregate(results: &[RQResult], group_by: GroupBy) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        let key = match group_by {
            GroupBy::Study => r.study_id.clone(),
            GroupBy::Theme => r.theme.as_str().to_string(),
            GroupBy::Mode => r.mode.as_str().to_string(),
            GroupBy::All => "all".to_string(),
        };
        groups.entry(key).or_default().push(r.similarity);
    }
    groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

pub struct EvalProviders<'a> {
    pub chat: &'a dyn ChatProvider,
    pub embedder: &'a dyn Embedder,
    pub policy: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    /// Original and simulated document per RQ, in RQ order.
    pub docs: Vec<FindingsDoc>,
    pub results: Vec<RQResult>,
}

fn process_doc(
    mut doc: FindingsDoc,
    rq: &str,
    chat: &dyn ChatProvider,
    policy: &RetryPolicy,
) -> Result<FindingsDoc> {
    let summary = summarize_for_rq(&doc, &[rq.to_string()], chat, policy)?;
    let revised = revise_summary(&summary, &doc.tag("revise"), chat, policy)?;
    doc.summary = Some(summary);
    doc.revised_summary = Some(revised);
    Ok(doc)
}

/// Summarizes and revises the original and simulated document of every RQ,
/// fanning out over `jobs` threads. `originals[k]` holds the original findings
/// for RQ k + 1; the simulated log text is shared by every RQ. Documents come
/// back paired per RQ: original, then simulated.
pub fn summarize_docs(
    study: &StudyConfig,
    originals: &[String],
    simulated: &str,
    chat: &dyn ChatProvider,
    policy: &RetryPolicy,
    jobs: usize,
) -> Result<Vec<FindingsDoc>> {
    let n = study.research_questions.len();
    if originals.len() != n {
        return Err(Error::Precondition(format!(
            "{} has {n} research questions but {} original findings",
            study.study_id,
            originals.len()
        )));
    }
    let mut work = Vec::with_capacity(2 * n);
    for (i, text) in originals.iter().enumerate() {
        work.push(FindingsDoc::new(
            &study.study_id,
            i + 1,
            Source::Original,
            text.clone(),
        ));
        work.push(FindingsDoc::new(
            &study.study_id,
            i + 1,
            Source::Simulated,
            simulated,
        ));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FindingsDoc>>>> =
        Mutex::new((0..work.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(doc) = work.get(i) else { break };
                let rq = &study.research_questions[doc.rq_index - 1];
                let out = process_doc(doc.clone(), rq, chat, policy);
                slots.lock().expect("pipeline slots poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("pipeline slots poisoned")
        .into_iter()
        .map(|d| d.expect("every document ran"))
        .collect()
}

/// Scores each (original, simulated) pair of revised summaries.
pub fn score_docs(
    study: &StudyConfig,
    docs: &[FindingsDoc],
    embedder: &dyn Embedder,
    policy: &RetryPolicy,
) -> Result<Vec<RQResult>> {
    let mut by_rq: BTreeMap<usize, [Option<&str>; 2]> = BTreeMap::new();
    for d in docs.iter().filter(|d| d.study_id == study.study_id) {
        let slot = match d.source {
            Source::Original => 0,
            Source::Simulated => 1,
        };
        by_rq.entry(d.rq_index).or_default()[slot] = d.revised_summary.as_deref();
    }
    by_rq
        .into_iter()
        .map(|(k, [orig, sim])| match (orig, sim) {
            (Some(o), Some(s)) => score_rq(study, k, o, s, embedder, policy),
            _ => Err(Error::Precondition(format!(
                "{} rq{k} lacks a revised original or simulated summary",
                study.study_id
            ))),
        })
        .collect()
}

pub fn run_pipeline(
    study: &StudyConfig,
    originals: &[String],
    simulated: &str,
    providers: &EvalProviders<'_>,
    jobs: usize,
) -> Result<PipelineOutput> {
    let docs = summarize_docs(
        study,
        originals,
        simulated,
        providers.chat,
        &providers.policy,
        jobs,
    )?;
    let results = score_docs(study, &docs, providers.embedder, &providers.policy)?;
    Ok(PipelineOutput { docs, results })
}

pub fn original_findings_path(root: &Path, study_id: &str, rq_index: usize) -> PathBuf {
    root.join(study_id)
        .join(format!("rq{rq_index}.original.txt"))
}

/// Reads `<root>/<study_id>/rq<k>.original.txt` for every RQ.
pub fn load_original_findings(root: &Path, study: &StudyConfig) -> Result<Vec<String>> {
    (1..=study.research_questions.len())
        .map(|k| {
            let path = original_findings_path(root, &study.study_id, k);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            nonempty(&text, &path.display().to_string())?;
            Ok(text)
        })
        .collect()
}

#[derive(Deserialize)]
struct InterviewRecord {
    question: String,
    answer: String,
}

/// Flattens a run into the text handed to summarization: per subject, each
/// expanded activity followed by that round's conversation, then interviews.
pub fn simulated_text(run: &LoadedRun) -> Result<String> {
    let mut out = String::new();
    for subject in run.manifest.subjects.keys() {
        out.push_str(&format!("## Participant {subject}\n\n"));
        let enriched = run.stream(subject, trace::ENRICHED);
        let turns = run.stream(subject, trace::TRANSCRIPT);
        for (i, e) in enriched.iter().enumerate() {
            let round = i as u64 + 1;
            if let Some(text) = e.payload.get("expanded").and_then(|v| v.as_str()) {
                out.push_str(&format!("Activity: {text}\n"));
            }
            for t in turns
                .iter()
                .filter(|t| t.payload.get("round").and_then(|r| r.as_u64()) == Some(round))
            {
                let who = match t.payload.get("speaker").and_then(|s| s.as_str()) {
                    Some("assistant") => "Assistant",
                    _ => "Participant",
                };
                let text = t
                    .payload
                    .get("text")
                    .and_then(|s| s.as_str())
                    .unwrap_or_default();
                out.push_str(&format!("{who}: {text}\n"));
            }
            out.push('\n');
        }
        let path = run.subject_dir(subject).join("interviews.json");
        if path.exists() {
            let interviews: BTreeMap<String, Vec<InterviewRecord>> = trace::read_json(&path)?;
            for (phase, answers) in interviews {
                out.push_str(&format!("Interview ({phase}):\n"));
                for a in answers {
                    out.push_str(&format!("Q: {}\nA: {}\n", a.question, a.answer));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn write_similarity_csv(path: &Path, results: &[RQResult]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    for r in results {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_similarity_csv(path: &Path) -> Result<Vec<RQResult>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(study: &str, theme: Theme, mode: Mode, s: f64) -> RQResult {
        RQResult {
            study_id: study.into(),
            rq_index: 1,
            similarity: s,
            theme,
            mode,
        }
    }

    #[test]
    fn aggregate_groups() {
        let rs = [
            result("a", Theme::Proactivity, Mode::Woz, 0.5),
            result("a", Theme::Proactivity, Mode::Woz, 0.7),
            result("b", Theme::UserControl, Mode::Interview, 0.9),
        ];
        assert!((aggregate(&rs, GroupBy::All)["all"] - 0.7).abs() < 1e-12);
        assert_eq!(aggregate(&rs, GroupBy::Study)["a"], 0.6);
        assert_eq!(aggregate(&rs, GroupBy::Mode)["interview"], 0.9);
        assert_eq!(aggregate(&rs[2..], GroupBy::Theme)["user_control"], 0.9);
    }

    #[test]
    fn empty_summary_is_rejected() {
        assert!(matches!(
            revision_request("  ", "t", "m"),
            Err(Error::Precondition(_))
        ));
    }
}
