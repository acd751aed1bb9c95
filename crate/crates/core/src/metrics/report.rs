//! Behavioral tables for a finished run, one per metric the study declares.

use std::collections::BTreeMap;

use crate::config::{InterviewPhase, MetricKind, MetricSpec, StudyConfig};
use crate::engine::{InterviewAnswer, Turn};
use crate::error::{Error, Result};
use crate::trace::{self, LoadedRun};

use super::{
    distribution_by_bucket, hour_of, mean, median, rank_compare, ranks_from_scores,
    rate_by_category, Probe,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem, e.g. `rate_accept`.
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Everything a report needs from one run, decoded from its streams.
#[derive(Debug, Clone, Default)]
pub struct RunData {
    /// Transcript turns per subject.
    pub turns: BTreeMap<String, Vec<Turn>>,
    pub interviews: BTreeMap<String, BTreeMap<InterviewPhase, Vec<InterviewAnswer>>>,
}

impl RunData {
    pub fn from_run(run: &LoadedRun) -> Result<Self> {
        let mut data = RunData::default();
        for subject in run.manifest.subjects.keys() {
            let turns = run
                .stream(subject, trace::TRANSCRIPT)
                .iter()
                .map(|e| {
                    serde_json::from_value(e.payload.clone()).map_err(|err| Error::Integrity {
                        stream: format!("{subject}/{}", trace::TRANSCRIPT),
                        seq: Some(e.seq),
                        reason: err.to_string(),
                    })
                })
                .collect::<Result<Vec<Turn>>>()?;
            data.turns.insert(subject.clone(), turns);
            let path = run.subject_dir(subject).join("interviews.json");
            if path.exists() {
                data.interviews
                    .insert(subject.clone(), trace::read_json(&path)?);
            }
        }
        Ok(data)
    }

    fn all_turns(&self) -> Vec<Turn> {
        self.turns.values().flatten().cloned().collect()
    }

    /// Every interview rating with the given key, across subjects and phases.
    fn interview_ratings(&self, key: &str) -> Vec<f64> {
        self.interviews
            .values()
            .flat_map(|phases| phases.values().flatten())
            .filter_map(|a| a.ratings.get(key))
            .map(|r| *r as f64)
            .collect()
    }
}

fn scenario_or_activity(p: &Probe) -> String {
    p.scenario_id.clone().unwrap_or_else(|| p.activity.clone())
}

fn rate_table(m: &MetricSpec, data: &RunData) -> Table {
    let mut t = Table::new(
        format!("rate_{}", m.metric_id),
        &["category", "accepted", "probes", "rate", "reference"],
    );
    for r in rate_by_category(&data.all_turns(), scenario_or_activity) {
        let reference = m
            .reference
            .as_ref()
            .and_then(|x| x.get(&r.category))
            .copied();
        t.push(vec![
            r.category,
            r.numerator.to_string(),
            r.denominator.to_string(),
            num(r.rate),
            opt(reference),
        ]);
    }
    t
}

fn distribution_table(m: &MetricSpec, study: &StudyConfig, data: &RunData) -> Table {
    let availability = study
        .metrics
        .iter()
        .find(|x| x.kind == MetricKind::Availability)
        .map(|x| x.metric_id.as_str());
    let mut t = Table::new(
        format!("distribution_{}", m.metric_id),
        &["hour", "answered", "unanswered", "mean_availability"],
    );
    for (hour, c) in distribution_by_bucket(&data.all_turns(), |p| hour_of(p.clock), availability) {
        t.push(vec![
            hour.to_string(),
            c.answered.to_string(),
            c.unanswered.to_string(),
            opt(c.mean_availability),
        ]);
    }
    t
}

fn scale_table(m: &MetricSpec, study: &StudyConfig, data: &RunData) -> Table {
    let mut t = Table::new(
        format!("ratings_{}", m.metric_id),
        &["item", "n", "mean", "median", "reference"],
    );
    for key in crate::engine::parse::required_rating_keys(study, &m.metric_id) {
        let mut values = data.interview_ratings(&key);
        if m.kind == MetricKind::Availability {
            values.extend(
                data.turns
                    .values()
                    .flatten()
                    .filter_map(|turn| turn.ratings.get(&key))
                    .map(|r| *r as f64),
            );
        }
        let item = key
            .split_once('/')
            .map_or(key.as_str(), |(_, i)| i)
            .to_string();
        let reference = m.reference.as_ref().and_then(|x| x.get(&item)).copied();
        let avg = (!values.is_empty()).then(|| mean(&values));
        t.push(vec![
            item,
            values.len().to_string(),
            opt(avg),
            opt(median(&values)),
            opt(reference),
        ]);
    }
    t
}

/// Median rank per item, re-ranked (1 = best) and compared with the
/// reference ranks when the metric carries them.
fn ranking_table(m: &MetricSpec, data: &RunData) -> Table {
    let mut t = Table::new(
        format!("ranking_{}", m.metric_id),
        &[
            "item",
            "median_rank",
            "simulated_rank",
            "reference_rank",
            "delta",
        ],
    );
    let medians: BTreeMap<String, f64> = m
        .categories
        .iter()
        .filter_map(|item| {
            median(&data.interview_ratings(&format!("{}/{item}", m.metric_id)))
                .map(|v| (item.clone(), v))
        })
        .collect();
    // Lower median rank is better, so negate before ranking by score.
    let simulated = ranks_from_scores(&medians.iter().map(|(k, v)| (k.clone(), -v)).collect());
    let reference: BTreeMap<String, i64> = m
        .reference
        .as_ref()
        .map(|r| {
            r.iter()
                .map(|(k, v)| (k.clone(), v.round() as i64))
                .collect()
        })
        .unwrap_or_default();
    let deltas: BTreeMap<String, u64> = rank_compare(&simulated, &reference).into_iter().collect();
    for (item, med) in &medians {
        t.push(vec![
            item.clone(),
            num(*med),
            simulated[item].to_string(),
            reference
                .get(item)
                .map(|r| r.to_string())
                .unwrap_or_default(),
            deltas.get(item).map(|d| d.to_string()).unwrap_or_default(),
        ]);
    }
    t
}

/// One table per declared metric plus a per-subject status table.
pub fn analyze_run(run: &LoadedRun, study: &StudyConfig) -> Result<Vec<Table>> {
    let data = RunData::from_run(run)?;
    let mut tables = Vec::new();
    let mut subjects = Table::new(
        "subjects",
        &["subject_id", "status", "turns", "probes", "accepted"],
    );
    for (id, entry) in &run.manifest.subjects {
        let turns = data.turns.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let probes = super::probes_from_transcript(turns);
        subjects.push(vec![
            id.clone(),
            format!("{:?}", entry.status).to_lowercase(),
            turns.len().to_string(),
            probes.len().to_string(),
            probes.iter().filter(|p| p.answered()).count().to_string(),
        ]);
    }
    tables.push(subjects);
    for m in &study.metrics {
        tables.push(match m.kind {
            MetricKind::Rate => rate_table(m, &data),
            MetricKind::Distribution => distribution_table(m, study, &data),
            MetricKind::Ranking => ranking_table(m, &data),
            MetricKind::Likert | MetricKind::TraitRating | MetricKind::Availability => {
                scale_table(m, study, &data)
            }
        });
    }
    Ok(tables)
}

pub fn write_table(dir: &std::path::Path, table: &Table) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}.csv", table.name));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_record(&table.header)
        .map_err(|e| Error::Parse(e.to_string()))?;
    for row in &table.rows {
        w.write_record(row)
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
