//! Numeric primitives for analysing runs and replication tables.

pub mod report;
pub mod special;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::Role;
use crate::engine::{Decision, Turn};
use crate::error::{Error, Result};
use crate::provider::EmbeddingVector;

pub use special::{incomplete_beta, ln_gamma, student_t_cdf, student_t_two_tailed};

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine(&a.values, &b.values)
}

/// Arithmetic mean with compensated (Neumaier) summation. NaN when empty.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    (sum + comp) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    mean(&dev) * xs.len() as f64 / (xs.len() as f64 - 1.0)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Median rating per category; mean of the middle two on even counts.
pub fn median_by_category<S: AsRef<str>>(ratings: &[(S, i64)]) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (cat, r) in ratings {
        groups
            .entry(cat.as_ref().to_string())
            .or_default()
            .push(*r as f64);
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| median(&v).map(|m| (k, m)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    Paired,
    TwoSamplePooled,
    TwoSampleWelch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tails {
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub kind: TTestKind,
    pub tails: Tails,
}

impl TTestResult {
    fn new(t: f64, df: f64, kind: TTestKind) -> Self {
        Self {
            t_statistic: t,
            degrees_of_freedom: df,
            p_value: student_t_two_tailed(t, df),
            kind,
            tails: Tails::Two,
        }
    }
}

fn need(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::Precondition(format!(
            "{what} needs at least 2 values, got {n}"
        )));
    }
    Ok(())
}

pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<TTestResult> {
    if xs.len() != ys.len() {
        return Err(Error::Precondition(format!(
            "paired samples differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    need(xs.len(), "paired t-test")?;
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let var = sample_variance(&d);
    if !(var > 0.0) {
        return Err(Error::DegenerateSample(
            "differences have zero variance".into(),
        ));
    }
    let n = d.len() as f64;
    let t = mean(&d) / (var / n).sqrt();
    Ok(TTestResult::new(t, n - 1.0, TTestKind::Paired))
}

/// Student's two-sample test with pooled variance.
pub fn two_sample_t_test(xs: &[f64], ys: &[f64]) -> Result<TTestResult> {
    need(xs.len(), "two-sample t-test")?;
    need(ys.len(), "two-sample t-test")?;
    let (n1, n2) = (xs.len() as f64, ys.len() as f64);
    let pooled =
        ((n1 - 1.0) * sample_variance(xs) + (n2 - 1.0) * sample_variance(ys)) / (n1 + n2 - 2.0);
    if !(pooled > 0.0) {
        return Err(Error::DegenerateSample("pooled variance is zero".into()));
    }
    let t = (mean(xs) - mean(ys)) / (pooled * (1.0 / n1 + 1.0 / n2)).sqrt();
    Ok(TTestResult::new(
        t,
        n1 + n2 - 2.0,
        TTestKind::TwoSamplePooled,
    ))
}

/// Welch's unequal-variance test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(xs: &[f64], ys: &[f64]) -> Result<TTestResult> {
    need(xs.len(), "Welch t-test")?;
    need(ys.len(), "Welch t-test")?;
    let (n1, n2) = (xs.len() as f64, ys.len() as f64);
    let (a, b) = (sample_variance(xs) / n1, sample_variance(ys) / n2);
    if !(a + b > 0.0) {
        return Err(Error::DegenerateSample(
            "both samples have zero variance".into(),
        ));
    }
    let t = (mean(xs) - mean(ys)) / (a + b).sqrt();
    let df = (a + b).powi(2) / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
    Ok(TTestResult::new(t, df, TTestKind::TwoSampleWelch))
}

pub fn t_test(kind: TTestKind, xs: &[f64], ys: &[f64]) -> Result<TTestResult> {
    match kind {
        TTestKind::Paired => paired_t_test(xs, ys),
        TTestKind::TwoSamplePooled => two_sample_t_test(xs, ys),
        TTestKind::TwoSampleWelch => welch_t_test(xs, ys),
    }
}

/// One assistant-initiated exchange: the first assistant turn of a round and
/// the avatar's eventual answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub round: u32,
    pub clock: i64,
    pub activity: String,
    pub scenario_id: Option<String>,
    /// Last non-`none` avatar decision in the round; `ignore` when the avatar never replied.
    pub decision: Decision,
    /// Ratings from the avatar turns of the round, later turns winning.
    pub ratings: BTreeMap<String, i64>,
}

impl Probe {
    pub fn answered(&self) -> bool {
        self.decision == Decision::Accept
    }
}

pub fn probes_from_transcript(turns: &[Turn]) -> Vec<Probe> {
    let mut out: Vec<Probe> = Vec::new();
    for t in turns {
        let open = out.last().is_some_and(|p| p.round == t.round);
        match t.speaker {
            // The first assistant turn of a round opens its probe, even when
            // the avatar spoke first.
            Role::Assistant if !open => out.push(Probe {
                round: t.round,
                clock: t.clock,
                activity: t.activity.clone(),
                scenario_id: t.scenario_id.clone(),
                decision: Decision::Ignore,
                ratings: BTreeMap::new(),
            }),
            Role::Avatar if open => {
                let p = out.last_mut().expect("open probe");
                if t.decision != Decision::None {
                    p.decision = t.decision;
                }
                p.ratings
                    .extend(t.ratings.iter().map(|(k, v)| (k.clone(), *v)));
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRate {
    pub category: String,
    pub numerator: u64,
    pub denominator: u64,
    pub rate: f64,
}

/// Accept rate per category over the probes in `turns`.
pub fn rate_by_category(
    turns: &[Turn],
    categorizer: impl Fn(&Probe) -> String,
) -> Vec<CategoryRate> {
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for p in probes_from_transcript(turns) {
        let c = counts.entry(categorizer(&p)).or_default();
        c.1 += 1;
        if p.answered() {
            c.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(category, (num, den))| CategoryRate {
            category,
            numerator: num,
            denominator: den,
            rate: num as f64 / den as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketCounts {
    pub answered: u64,
    pub unanswered: u64,
    pub mean_availability: Option<f64>,
}

/// Answered/unanswered probe counts per bucket, plus the mean of
/// `availability_metric` ratings where present.
pub fn distribution_by_bucket<B: Ord>(
    turns: &[Turn],
    bucketizer: impl Fn(&Probe) -> B,
    availability_metric: Option<&str>,
) -> BTreeMap<B, BucketCounts> {
    let mut out: BTreeMap<B, (BucketCounts, Vec<f64>)> = BTreeMap::new();
    for p in probes_from_transcript(turns) {
        let entry = out.entry(bucketizer(&p)).or_default();
        if p.answered() {
            entry.0.answered += 1;
        } else {
            entry.0.unanswered += 1;
        }
        if let Some(r) = availability_metric.and_then(|m| p.ratings.get(m)) {
            entry.1.push(*r as f64);
        }
    }
    out.into_iter()
        .map(|(k, (mut counts, avail))| {
            counts.mean_availability = (!avail.is_empty()).then(|| mean(&avail));
            (k, counts)
        })
        .collect()
}

/// Hour of day (0-23) of a logical clock value.
pub fn hour_of(clock: i64) -> u32 {
    (clock.rem_euclid(86_400) / 3_600) as u32
}

/// `(item, |rank_a - rank_b|)` for items ranked in both maps, in item order.
pub fn rank_compare(a: &BTreeMap<String, i64>, b: &BTreeMap<String, i64>) -> Vec<(String, u64)> {
    a.iter()
        .filter_map(|(item, ra)| b.get(item).map(|rb| (item.clone(), ra.abs_diff(*rb))))
        .collect()
}

/// Ranks items by descending score, 1 = best; ties share the lowest rank.
pub fn ranks_from_scores(scores: &BTreeMap<String, f64>) -> BTreeMap<String, i64> {
    scores
        .iter()
        .map(|(item, s)| {
            let better = scores.values().filter(|o| **o > *s).count() as i64;
            (item.clone(), better + 1)
        })
        .collect()
}
