//! Checks for training-data exposure.
//!
//! The temporal method splits studies at a model's knowledge cutoff and tests
//! whether similarity differs between the exposed and the controlled group.
//! The continuation method asks the model to continue an excerpt of a study
//! with its numbers stripped and scores the continuations against the
//! original findings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cosine_similarity, mean, welch_t_test, TTestResult};
use crate::prompts::{fill, CONTINUATION_TEMPLATE, EVALUATION_SYSTEM};
use crate::provider::{
    builtin_identities, chat_with_retry, embed_with_retry, ChatMessage, ChatProvider, ChatRequest,
    Embedder, ProviderIdentity, RetryPolicy, EVALUATION_TEMPERATURE,
};

/// Continuation scores above this are flagged as possibly memorized.
pub const VERBATIM_THRESHOLD: f64 = 0.90;
pub const CONTINUATION_RUNS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoffInfo {
    pub model_id: String,
    pub knowledge_cutoff: NaiveDate,
}

impl CutoffInfo {
    pub fn from_identity(id: &ProviderIdentity) -> Option<Self> {
        id.knowledge_cutoff.map(|d| Self {
            model_id: id.id.clone(),
            knowledge_cutoff: d,
        })
    }
}

/// Cutoffs of the bundled provider identities.
pub fn builtin_cutoffs() -> Vec<CutoffInfo> {
    builtin_identities()
        .iter()
        .filter_map(CutoffInfo::from_identity)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageMethod {
    Temporal,
    Continuation,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    /// Published on or before the cutoff.
    pub exposed: Vec<String>,
    pub controlled: Vec<String>,
}

pub fn temporal_split(studies: &[(String, NaiveDate)], cutoff: NaiveDate) -> Split {
    let mut split = Split::default();
    for (id, date) in studies {
        if *date <= cutoff {
            split.exposed.push(id.clone());
        } else {
            split.controlled.push(id.clone());
        }
    }
    split
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub model_id: String,
    pub method: LeakageMethod,
    pub exposed: Vec<String>,
    pub controlled: Vec<String>,
    pub exposed_mean: f64,
    pub controlled_mean: f64,
    pub t_test: TTestResult,
    pub verbatim_threshold: f64,
    pub verbatim_flags: Vec<(String, f64)>,
}

fn group<T: Clone>(scores: &BTreeMap<String, T>, ids: &[String]) -> Result<Vec<T>> {
    ids.iter()
        .map(|id| {
            scores
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Precondition(format!("no scores for study {id}")))
        })
        .collect()
}

/// Welch two-sample test over every RQ score in each group, pooled across
/// studies.
pub fn method1_test(
    model_id: &str,
    scores: &BTreeMap<String, Vec<f64>>,
    split: &Split,
) -> Result<LeakageReport> {
    let exposed: Vec<f64> = group(scores, &split.exposed)?.concat();
    let controlled: Vec<f64> = group(scores, &split.controlled)?.concat();
    let t = welch_t_test(&exposed, &controlled)?;
    Ok(LeakageReport {
        model_id: model_id.into(),
        method: LeakageMethod::Temporal,
        exposed: split.exposed.clone(),
        controlled: split.controlled.clone(),
        exposed_mean: mean(&exposed),
        controlled_mean: mean(&controlled),
        t_test: t,
        verbatim_threshold: VERBATIM_THRESHOLD,
        verbatim_flags: Vec::new(),
    })
}

fn numeral_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:[.,]\d+)*|\.\d+").expect("numeral regex"))
}

/// Replaces every numeric literal with `[n]`, keeping the surrounding text.
pub fn strip_numerals(text: &str) -> String {
    numeral_re().replace_all(text, "[n]").into_owned()
}

pub fn continuation_request(
    excerpt: &str,
    tag: impl Into<String>,
    model_id: &str,
) -> Result<ChatRequest> {
    if excerpt.trim().is_empty() {
        return Err(Error::Precondition("excerpt is empty".into()));
    }
    let prompt = fill(CONTINUATION_TEMPLATE, &[("Study Data Excerpt", excerpt)])?;
    Ok(ChatRequest::new(
        model_id,
        tag,
        vec![
            ChatMessage::system(EVALUATION_SYSTEM),
            ChatMessage::user(prompt),
        ],
    )
    .with_temperature(EVALUATION_TEMPERATURE))
}

/// `runs` independent continuations, tagged `continue/<label>/run<i>`.
pub fn continuation_probe(
    excerpt: &str,
    label: &str,
    provider: &dyn ChatProvider,
    runs: usize,
    policy: &RetryPolicy,
) -> Result<Vec<String>> {
    (1..=runs)
        .map(|i| {
            let req = continuation_request(
                excerpt,
                format!("continue/{label}/run{i}"),
                &provider.identity().model_id,
            )?;
            Ok(chat_with_retry(provider, &req, policy)?.response.text)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method2Score {
    pub average: f64,
    pub max: f64,
    pub verbatim: bool,
}

impl Method2Score {
    /// A score known only by its average, such as a published table cell.
    pub fn from_average(average: f64) -> Self {
        Self {
            average,
            max: average,
            verbatim: average > VERBATIM_THRESHOLD,
        }
    }
}

pub fn method2_score(
    continuations: &[String],
    original_findings: &str,
    embedder: &dyn Embedder,
    policy: &RetryPolicy,
) -> Result<Method2Score> {
    if continuations.is_empty() {
        return Err(Error::Precondition("no continuations to score".into()));
    }
    let mut texts = vec![original_findings.to_string()];
    texts.extend(continuations.iter().cloned());
    let v = embed_with_retry(embedder, &texts, policy)?;
    let scores = v[1..]
        .iter()
        .map(|c| cosine_similarity(&v[0], c))
        .collect::<Result<Vec<f64>>>()?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Method2Score {
        average: mean(&scores),
        max,
        verbatim: max > VERBATIM_THRESHOLD,
    })
}

/// Welch test over per-study averages, exposed against controlled.
pub fn method2_test(
    model_id: &str,
    scores: &BTreeMap<String, Method2Score>,
    split: &Split,
) -> Result<LeakageReport> {
    let averages: BTreeMap<String, Vec<f64>> = scores
        .iter()
        .map(|(k, s)| (k.clone(), vec![s.average]))
        .collect();
    let mut report = method1_test(model_id, &averages, split)?;
    report.method = LeakageMethod::Continuation;
    report.verbatim_flags = scores
        .iter()
        .filter(|(_, s)| s.verbatim)
        .map(|(k, s)| (k.clone(), s.max))
        .collect();
    Ok(report)
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    model_id: &'a str,
    method: LeakageMethod,
    study_id: &'a str,
    group: &'static str,
    rq_index: Option<usize>,
    score: f64,
}

/// Writes `leakage_<model>.json` and a long-format `leakage_<model>.csv`
/// with one row per score into `dir`.
pub fn write_report(
    dir: &Path,
    report: &LeakageReport,
    scores: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::trace::write_json(
        &dir.join(format!("leakage_{}.json", report.model_id)),
        report,
    )?;
    let path = dir.join(format!("leakage_{}.csv", report.model_id));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Parse(e.to_string()))?;
    let groups = [
        ("exposed", &report.exposed),
        ("controlled", &report.controlled),
    ];
    for (name, ids) in groups {
        for id in ids.iter() {
            let Some(values) = scores.get(id) else {
                continue;
            };
            for (i, v) in values.iter().enumerate() {
                w.serialize(CsvRow {
                    model_id: &report.model_id,
                    method: report.method,
                    study_id: id,
                    group: name,
                    rq_index: (report.method == LeakageMethod::Temporal).then_some(i + 1),
                    score: *v,
                })
                .map_err(|e| Error::Parse(e.to_string()))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, 1).unwrap()
    }

    #[test]
    fn split_edges() {
        let studies = vec![("a".to_string(), d(2020, 1)), ("b".to_string(), d(2024, 1))];
        assert!(temporal_split(&studies, d(2019, 1)).exposed.is_empty());
        assert!(temporal_split(&studies, d(2025, 1)).controlled.is_empty());
        let s = temporal_split(&studies, d(2020, 1));
        assert_eq!((s.exposed.len(), s.controlled.len()), (1, 1));
    }

    #[test]
    fn numerals() {
        assert_eq!(
            strip_numerals("rate of 0.82 and 44%"),
            "rate of [n] and [n]%"
        );
        assert_eq!(
            strip_numerals("t(14) = -4.58, p = .0004"),
            "t([n]) = -[n], p = [n]"
        );
        assert_eq!(strip_numerals("no digits"), "no digits");
    }

    #[test]
    fn missing_study_scores() {
        let split = Split {
            exposed: vec!["x".into()],
            controlled: vec![],
        };
        assert!(matches!(
            method1_test("m", &BTreeMap::new(), &split),
            Err(Error::Precondition(_))
        ));
    }
}
