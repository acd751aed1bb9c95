use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, Timelike};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, Median};

use studysim::config::{load_config, parse_config, StudyConfig};
use studysim::context::{sample_profiles, EnvironmentConfig, ProfileDistribution, Role};
use studysim::engine::parse::parse_schedule_entry;
use studysim::engine::{run_study, Decision, RunOptions, StudyProviders, Timestamp, Turn};
use studysim::evalpipe::{aggregate, read_similarity_csv, GroupBy};
use studysim::leakage::{method1_test, method2_test, temporal_split, Method2Score};
use studysim::metrics::{
    cosine, distribution_by_bucket, hour_of, mean, median, median_by_category, paired_t_test,
    rank_compare, rate_by_category, two_sample_t_test, welch_t_test,
};
use studysim::provider::{ChatFn, ChatRequest, ChatResponse, ProviderError};
use studysim::trace::EventKind;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn read_json<T: serde::de::DeserializeOwned>(rel: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join(rel)).unwrap()).unwrap()
}

/// Writes past the test harness capture so verdicts always reach the log.
fn announce(line: &str) {
    use std::io::Write;
    let _ = std::io::stderr().lock().write_all(format!("{line}\n").as_bytes());
}

fn verdict(n: u32, failures: &[String], elapsed: Duration, limit: Duration) {
    let mut failures = failures.to_vec();
    if elapsed > limit {
        failures.push(format!("took {elapsed:?}, limit {limit:?}"));
    }
    if failures.is_empty() {
        announce(&format!("AC{n} PASS ({elapsed:.2?})"));
    } else {
        announce(&format!("AC{n} FAIL"));
        for f in &failures {
            announce(&format!("  {f}"));
        }
        panic!("AC{n} failed: {failures:?}");
    }
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl Into<String>) {
    if !ok {
        failures.push(what.into());
    }
}

struct Draw(SplitMix64);

impl Draw {
    fn new(seed: u64) -> Self {
        Draw(SplitMix64::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn below(&mut self, n: u64) -> u64 {
        self.0.next_u64() % n
    }

    fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.range(-10.0, 10.0)).collect()
    }

    fn hex(&mut self) -> String {
        format!("{:012x}", self.0.next_u64() & 0xffff_ffff_ffff)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---- AC1 oracles --------------------------------------------------------

fn exact_mean(xs: &[f64]) -> f64 {
    let sum = xs
        .iter()
        .map(|x| BigRational::from_float(*x).unwrap())
        .fold(BigRational::from_integer(BigInt::from(0)), |a, b| a + b);
    let q = sum / BigRational::from_integer(BigInt::from(xs.len()));
    // Numerator and denominator can exceed f64 range; scale first.
    let n: f64 = q.numer().to_string().parse().unwrap();
    let d: f64 = q.denom().to_string().parse().unwrap();
    if n.is_finite() && d.is_finite() {
        n / d
    } else {
        let shift = q.denom().bits().saturating_sub(1000) as u32;
        let num = q.numer() >> shift;
        let den = q.denom() >> shift;
        num.to_string().parse::<f64>().unwrap() / den.to_string().parse::<f64>().unwrap()
    }
}

fn brute_median(xs: &[f64]) -> f64 {
    // The k-th smallest by counting, no sort.
    let kth = |k: usize| {
        *xs.iter()
            .find(|x| {
                let below = xs.iter().filter(|y| y < x).count();
                let equal = xs.iter().filter(|y| y == x).count();
                below <= k && k < below + equal
            })
            .unwrap()
    };
    let n = xs.len();
    if n % 2 == 1 {
        kth(n / 2)
    } else {
        (kth(n / 2 - 1) + kth(n / 2)) / 2.0
    }
}

fn textbook_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn naive_var(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn naive_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn two_tailed(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    2.0 * dist.cdf(-t.abs())
}

fn textbook_paired(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let t = naive_mean(&d) / (naive_var(&d).sqrt() / n.sqrt());
    (t, n - 1.0, two_tailed(t, n - 1.0))
}

fn textbook_pooled(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let sp2 = ((n1 - 1.0) * naive_var(x) + (n2 - 1.0) * naive_var(y)) / (n1 + n2 - 2.0);
    let t = (naive_mean(x) - naive_mean(y)) / (sp2 * (1.0 / n1 + 1.0 / n2)).sqrt();
    (t, n1 + n2 - 2.0, two_tailed(t, n1 + n2 - 2.0))
}

fn textbook_welch(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (a, b) = (naive_var(x) / n1, naive_var(y) / n2);
    let t = (naive_mean(x) - naive_mean(y)) / (a + b).sqrt();
    let df = (a + b).powi(2) / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
    (t, df, two_tailed(t, df))
}

#[test]
fn ac1_statistics_oracles() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut d = Draw::new(0xac1);
    for i in 0..120 {
        let n = 2 + d.below(40) as usize;
        let a = d.vec(n);
        let b = d.vec(n);
        let c = cosine(&a, &b).unwrap();
        check(
            &mut failures,
            close(c, textbook_cosine(&a, &b), 1e-9),
            format!("cosine #{i}"),
        );
        check(
            &mut failures,
            close(mean(&a), exact_mean(&a), 1e-9),
            format!("mean #{i}"),
        );
        let m = median(&a).unwrap();
        check(
            &mut failures,
            close(m, brute_median(&a), 1e-9),
            format!("median #{i} (brute)"),
        );
        check(
            &mut failures,
            close(m, Data::new(a.clone()).median(), 1e-9),
            format!("median #{i} (statrs)"),
        );

        let shifted: Vec<f64> = b.iter().map(|v| v * 0.3 + d.range(-1.0, 1.0)).collect();
        let p = paired_t_test(&a, &shifted).unwrap();
        let (t, df, pv) = textbook_paired(&a, &shifted);
        check(
            &mut failures,
            close(p.t_statistic, t, 1e-9)
                && p.degrees_of_freedom == df
                && (p.p_value - pv).abs() <= 1e-9,
            format!("paired #{i}: {p:?} vs ({t}, {df}, {pv})"),
        );

        let m2 = 2 + d.below(30) as usize;
        let y: Vec<f64> = (0..m2).map(|_| d.range(-6.0, 12.0)).collect();
        let s = two_sample_t_test(&a, &y).unwrap();
        let (t, df, pv) = textbook_pooled(&a, &y);
        check(
            &mut failures,
            close(s.t_statistic, t, 1e-9)
                && s.degrees_of_freedom == df
                && (s.p_value - pv).abs() <= 1e-9,
            format!("pooled #{i}: {s:?} vs ({t}, {df}, {pv})"),
        );
        let w = welch_t_test(&a, &y).unwrap();
        let (t, df, pv) = textbook_welch(&a, &y);
        check(
            &mut failures,
            close(w.t_statistic, t, 1e-9)
                && close(w.degrees_of_freedom, df, 1e-9)
                && (w.p_value - pv).abs() <= 1e-9,
            format!("welch #{i}: {w:?} vs ({t}, {df}, {pv})"),
        );
    }
    verdict(1, &failures, start.elapsed(), Duration::from_secs(5));
}

// ---- AC2 / AC3 leakage tables ------------------------------------------

fn study_dates() -> Vec<(String, NaiveDate)> {
    let mut out: Vec<(String, NaiveDate)> = std::fs::read_dir(fixtures().join("studies"))
        .unwrap()
        .map(|e| {
            let cfg = load_config(&e.unwrap().path()).unwrap();
            (cfg.study_id, cfg.publication_date)
        })
        .collect();
    out.sort();
    out
}

fn cutoff(model: &str) -> NaiveDate {
    studysim::leakage::builtin_cutoffs()
        .into_iter()
        .find(|c| c.model_id == model)
        .unwrap()
        .knowledge_cutoff
}

const MODELS: [(&str, f64, f64); 3] = [
    ("gpt-4o", 0.82, 0.14),
    ("llama-3.1-70b", 0.43, 0.77),
    ("mixtral-8x7b", 0.53, 0.31),
];

#[test]
fn ac2_method1_p_values() {
    let start = Instant::now();
    let scores: BTreeMap<String, BTreeMap<String, Vec<f64>>> = read_json("published/method1.json");
    let dates = study_dates();
    let mut failures = Vec::new();
    for (model, target, _) in MODELS {
        let split = temporal_split(&dates, cutoff(model));
        check(
            &mut failures,
            split.controlled == ["CS4", "CS9"],
            format!("{model}: controlled {:?}", split.controlled),
        );
        let r = method1_test(model, &scores[model], &split).unwrap();
        let p = r.t_test.p_value;
        // Reported for contrast: equal-variance pooling does not reproduce the table.
        let flat = |ids: &[String]| -> Vec<f64> {
            ids.iter()
                .flat_map(|id| scores[model][id].clone())
                .collect()
        };
        let pooled = two_sample_t_test(&flat(&split.exposed), &flat(&split.controlled)).unwrap();
        println!(
            "  {model}: welch p = {p:.4}, pooled p = {:.4} (target {target})",
            pooled.p_value
        );
        check(
            &mut failures,
            (p - target).abs() <= 0.03,
            format!("{model}: p = {p:.4}, target {target}"),
        );
    }
    verdict(2, &failures, start.elapsed(), Duration::from_secs(1));
}

#[test]
fn ac3_method2_p_values() {
    let start = Instant::now();
    let scores: BTreeMap<String, BTreeMap<String, f64>> = read_json("published/method2.json");
    let dates = study_dates();
    let mut failures = Vec::new();
    for (model, _, target) in MODELS {
        let split = temporal_split(&dates, cutoff(model));
        let s: BTreeMap<String, Method2Score> = scores[model]
            .iter()
            .map(|(k, v)| (k.clone(), Method2Score::from_average(*v)))
            .collect();
        let r = method2_test(model, &s, &split).unwrap();
        let p = r.t_test.p_value;
        println!("  {model}: p = {p:.4} (target {target})");
        check(
            &mut failures,
            (p - target).abs() <= 0.05,
            format!("{model}: p = {p:.4}, target {target}"),
        );
        check(
            &mut failures,
            r.verbatim_flags.is_empty(),
            format!("{model}: unexpected verbatim flags"),
        );
    }
    verdict(3, &failures, start.elapsed(), Duration::from_secs(1));
}

// ---- AC4 / AC5 aggregation ---------------------------------------------

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[test]
fn ac4_cross_validation_averages() {
    let start = Instant::now();
    let rows: BTreeMap<String, Vec<f64>> = read_json("published/cross_validation.json");
    let targets = [
        ("gpt-4o", 0.83),
        ("claude-sonnet-4", 0.83),
        ("gemini-2.5-pro", 0.82),
        ("llama-3.1-70b", 0.83),
        ("mixtral-8x7b", 0.82),
    ];
    let mut failures = Vec::new();
    for (model, target) in targets {
        let m = mean(&rows[model]);
        println!("  {model}: {m:.3}");
        check(
            &mut failures,
            rows[model].len() == 10,
            format!("{model}: not 10 scores"),
        );
        check(
            &mut failures,
            round2(m) == target,
            format!("{model}: {m:.4} rounds to {}", round2(m)),
        );
    }
    verdict(4, &failures, start.elapsed(), Duration::from_secs(1));
}

#[test]
fn ac5_aggregation_fixture() {
    let start = Instant::now();
    let results = read_similarity_csv(&fixtures().join("published/similarity_gpt4o.csv")).unwrap();
    let mut failures = Vec::new();
    check(
        &mut failures,
        results.len() == 25,
        format!("{} RQ rows", results.len()),
    );
    let all = aggregate(&results, GroupBy::All)["all"];
    check(
        &mut failures,
        (all - 0.85).abs() <= 0.01,
        format!("overall {all:.3}"),
    );

    let theme = aggregate(&results, GroupBy::Theme);
    println!("  overall {all:.3}, themes {theme:?}");
    check(
        &mut failures,
        (theme["proactivity"] - 0.89).abs() <= 0.01,
        "proactivity",
    );
    check(
        &mut failures,
        (theme["personalization"] - 0.87).abs() <= 0.01,
        "personalization",
    );
    check(
        &mut failures,
        theme["interruptibility"] >= 0.81 - 1e-9,
        "interruptibility",
    );
    check(
        &mut failures,
        theme["user_control"] >= 0.81 - 1e-9,
        "user_control floor",
    );
    let lowest = theme.iter().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    check(
        &mut failures,
        lowest == "user_control",
        format!("lowest theme is {lowest}"),
    );

    let mode = aggregate(&results, GroupBy::Mode);
    println!("  modes {mode:?}");
    for (k, target) in [("interview", 0.91), ("storyboard", 0.87), ("woz", 0.82)] {
        check(
            &mut failures,
            (mode[k] - target).abs() <= 0.01,
            format!("{k}: {:.3}", mode[k]),
        );
    }
    verdict(5, &failures, start.elapsed(), Duration::from_secs(1));
}

// ---- AC6 determinism ---------------------------------------------------

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn ac6_simulate_is_deterministic() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut ids = Vec::new();
    for attempt in ["a", "b"] {
        let out_dir = tmp.path().join(attempt);
        let mut out = Vec::new();
        let code = studysim::cli::run_with(
            [
                "studysim".into(),
                "simulate".into(),
                "--config".into(),
                fixtures().join("studies/cs9.json").into_os_string(),
                "--scripted".into(),
                fixtures()
                    .join("scripts/cs9_scripted.json")
                    .into_os_string(),
                "--seed".into(),
                "7".into(),
                "--out".into(),
                out_dir.into_os_string(),
            ],
            &mut out,
        );
        assert_eq!(code, 0, "{}", String::from_utf8_lossy(&out));
        ids.push(
            String::from_utf8(out)
                .unwrap()
                .lines()
                .last()
                .unwrap()
                .trim()
                .to_string(),
        );
    }
    let mut failures = Vec::new();
    check(
        &mut failures,
        ids[0] == ids[1],
        format!("run ids differ: {ids:?}"),
    );
    let a = tree(&tmp.path().join("a").join(&ids[0]));
    let b = tree(&tmp.path().join("b").join(&ids[1]));
    check(
        &mut failures,
        a.len() > 4,
        format!("only {} files", a.len()),
    );
    let differing: Vec<_> = a
        .keys()
        .chain(b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    check(
        &mut failures,
        differing.is_empty(),
        format!("differing files: {differing:?}"),
    );
    println!("  {} files compared in {}", a.len(), ids[0]);
    verdict(6, &failures, start.elapsed(), Duration::from_secs(10));
}

// ---- AC7 knowledge isolation -------------------------------------------

struct Secrets {
    rqs: Vec<String>,
    assistant_role: String,
    rubrics: Vec<String>,
}

fn fuzz_config(d: &mut Draw, i: usize) -> (StudyConfig, Secrets) {
    let rqs: Vec<String> = (0..1 + d.below(3))
        .map(|_| format!("rq-{} how do residents react", d.hex()))
        .collect();
    let assistant_role = format!("assistant-brief-{} steer the resident", d.hex());
    let rubrics: Vec<String> = (0..1 + d.below(2))
        .map(|_| format!("rubric-{} compare means", d.hex()))
        .collect();
    let metrics: Vec<Value> = rubrics
        .iter()
        .enumerate()
        .map(|(k, r)| json!({"metric_id": format!("m{k}"), "kind": "likert", "scale_min": 1, "scale_max": 5, "label": "how it felt", "rubric": r}))
        .collect();
    let initiation = ["assistant_proactive", "avatar_initiated", "scripted"][d.below(3) as usize];
    let turn_mode = ["single_turn", "multi_turn"][d.below(2) as usize];
    let mut phases = Vec::new();
    let mut interviews = serde_json::Map::new();
    for (phase, key) in [("pre_interview", "pre"), ("mid_interview", "mid")] {
        if d.below(2) == 1 {
            phases.push(phase);
            interviews.insert(key.into(), json!(["What is on your mind right now?"]));
        }
    }
    phases.sort_by_key(|p| if *p == "pre_interview" { 0 } else { 2 });
    phases.insert(
        phases
            .iter()
            .position(|p| *p == "mid_interview")
            .unwrap_or(phases.len()),
        "simulation",
    );
    if phases.contains(&"mid_interview") {
        // Mid interviews happen inside the simulation phase.
        phases.retain(|p| *p != "mid_interview");
        phases.push("mid_interview");
    }
    phases.push("post_interview");
    interviews.insert(
        "post".into(),
        json!(["How was it overall?", {"text": "Rate the experience.", "metric": "m0"}]),
    );
    let scenarios: Vec<Value> = (0..1 + d.below(3))
        .map(|k| json!({"scenario_id": format!("s{k}"), "narrative": format!("scene {k}: the assistant offers help")}))
        .collect();
    let cfg = json!({
        "schema_version": 1,
        "study_id": format!("FZ{i}"),
        "title": "fuzz",
        "theme": "proactivity",
        "mode": "woz",
        "publication_date": "2024-01-01",
        "objective": "observe reactions",
        "research_questions": rqs,
        "scenarios": scenarios,
        "interviews": interviews,
        "assistant_role": assistant_role,
        "avatar_role": "live your day and react honestly",
        "policy": {
            "turn_mode": turn_mode,
            "max_rounds": 1 + d.below(3),
            "max_turns_per_round": 1 + d.below(4),
            "phases": phases,
            "initiation": initiation
        },
        "metrics": metrics
    });
    let cfg = parse_config(&cfg.to_string())
        .unwrap_or_else(|e| panic!("generated config invalid: {e}\n{cfg:#}"));
    (
        cfg,
        Secrets {
            rqs,
            assistant_role,
            rubrics,
        },
    )
}

fn last_tag_part(req: &ChatRequest) -> &str {
    req.request_tag.rsplit('/').next().unwrap_or("")
}

fn reply(text: String) -> Result<ChatResponse, ProviderError> {
    Ok(ChatResponse::stop(text))
}

fn avatar_side(
    req: &ChatRequest,
    note: &str,
    clock: &Mutex<i64>,
) -> Result<ChatResponse, ProviderError> {
    let tag = req.request_tag.as_str();
    if tag.ends_with("/schedule") {
        let mut c = clock.lock().unwrap();
        let start = Timestamp::from_secs(*c);
        let end = Timestamp::from_secs(*c + 1800);
        *c += 1800;
        return reply(json!({"Start_time": start, "Activity": "tidy the kitchen", "End_time": end, "Reasoning": "it is messy"}).to_string());
    }
    if tag.ends_with("/enrich") {
        let at = Timestamp::from_secs(*clock.lock().unwrap());
        return reply(
            json!({"time_stamp": at, "Expanded Activity": "wiping the counter"}).to_string(),
        );
    }
    if tag.contains("/interview/") {
        return reply(format!("It was fine, {note}.\nRATING[m0]: 3\nNOTE: {note}"));
    }
    if tag.ends_with("/avatar") {
        return reply(format!("Okay, {note}.\nDECISION: accept\nNOTE: {note}"));
    }
    reply(format!("A quiet person who likes order. {note}"))
}

#[test]
fn ac7_knowledge_isolation_fuzz() {
    let start = Instant::now();
    let mut d = Draw::new(0xac7);
    let env = EnvironmentConfig::one_bedroom();
    let mut failures = Vec::new();
    let (mut avatar_prompts, mut assistant_prompts) = (0usize, 0usize);
    for i in 0..100 {
        let (cfg, secrets) = fuzz_config(&mut d, i);
        let note = format!("private-note-{}", d.hex());
        let leak = format!(
            "{} {} {} {}",
            secrets.rqs[0],
            secrets.assistant_role,
            secrets.rubrics[0],
            secrets.rqs.last().unwrap()
        );
        // A forbidden string nested inside another reappears after one pass.
        let (head, tail) = secrets.rqs[0].split_at(secrets.rqs[0].len() / 2);
        let nested = format!("{head}{}{tail}", secrets.rqs[0]);

        let seen_assistant: Mutex<Vec<ChatRequest>> = Mutex::new(Vec::new());
        let seen_avatar: Mutex<Vec<ChatRequest>> = Mutex::new(Vec::new());
        let clock = Mutex::new(1_738_828_800i64);
        let assistant = ChatFn::new(|req: &ChatRequest| {
            seen_assistant.lock().unwrap().push(req.clone());
            reply(format!("Per my brief: {leak}. Also {nested}."))
        });
        let avatar = ChatFn::new(|req: &ChatRequest| {
            seen_avatar.lock().unwrap().push(req.clone());
            avatar_side(req, &note, &clock)
        });
        let profiles = sample_profiles(
            &ProfileDistribution::adult_residents(),
            1 + d.below(2) as usize,
            i as u64,
        )
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let mut opts = RunOptions::new(tmp.path(), i as u64);
        opts.durability = studysim::trace::Durability::Flush;
        let outcome = run_study(
            &cfg,
            &profiles,
            &env,
            &StudyProviders {
                assistant: &assistant,
                avatar: &avatar,
            },
            &opts,
        )
        .unwrap();
        for s in &outcome.subjects {
            check(
                &mut failures,
                s.error.is_none(),
                format!(
                    "config {i} subject {} failed: {:?}",
                    s.profile.subject_id, s.error
                ),
            );
        }
        let mut forbidden: Vec<&str> = secrets.rqs.iter().map(String::as_str).collect();
        forbidden.push(&secrets.assistant_role);
        forbidden.extend(secrets.rubrics.iter().map(String::as_str));
        for req in seen_avatar.lock().unwrap().iter() {
            avatar_prompts += 1;
            for m in &req.messages {
                for f in &forbidden {
                    check(
                        &mut failures,
                        !m.content.contains(f),
                        format!(
                            "config {i}: avatar prompt {} contains `{f}`",
                            req.request_tag
                        ),
                    );
                }
            }
        }
        for req in seen_assistant.lock().unwrap().iter() {
            assistant_prompts += 1;
            let leaked = req.messages.iter().any(|m| m.content.contains(&note));
            check(
                &mut failures,
                !leaked,
                format!(
                    "config {i}: assistant prompt {} contains the avatar note",
                    req.request_tag
                ),
            );
            check(
                &mut failures,
                last_tag_part(req) == "assistant",
                format!("assistant asked for {}", req.request_tag),
            );
        }
    }
    println!("  {avatar_prompts} avatar and {assistant_prompts} assistant prompts checked");
    check(
        &mut failures,
        assistant_prompts > 0 && avatar_prompts > 0,
        "no prompts captured",
    );
    verdict(7, &failures, start.elapsed(), Duration::from_secs(60));
}

// ---- AC8 timestamps and continuity -------------------------------------

fn timestamp_corpus() -> Vec<String> {
    let mut d = Draw::new(0xac8);
    let mut corpus = vec![
        "2025-02-06 11:48:48 pm".to_string(),
        "2025-02-06 12:00:00 am".into(),
        "2025-02-06 12:00:00 pm".into(),
        "2025-02-06 12:59:59 am".into(),
        "2025-02-06 01:00:00 pm".into(),
        "2024-02-29 06:30:00 am".into(),
        "2025-12-31 11:59:59 pm".into(),
        "2025-01-01 12:00:01 am".into(),
        "2025-02-06 9:05:00 am".into(),
        "2025-02-06 09:05 am".into(),
        "2025-02-06 9:05 PM".into(),
        "2025-02-06 07:15:30pm".into(),
    ];
    while corpus.len() < 50 {
        let secs = 1_700_000_000 + d.below(200_000_000) as i64;
        corpus.push(Timestamp::from_secs(secs).to_string());
    }
    corpus
}

fn fuzz_continuity(seed: u64, rounds: u32, failures: &mut Vec<String>) -> usize {
    let mut cfg: Value = serde_json::from_str(
        &std::fs::read_to_string(fixtures().join("studies/cs9.json")).unwrap(),
    )
    .unwrap();
    cfg["policy"]["max_rounds"] = json!(rounds);
    cfg["policy"]["turn_mode"] = json!("single_turn");
    cfg["policy"]["phases"] = json!(["simulation"]);
    let cfg = parse_config(&cfg.to_string()).unwrap();
    let draws = Mutex::new(Draw::new(seed));
    let raw_end = Mutex::new(1_738_828_800i64);
    let chat = ChatFn::new(|req: &ChatRequest| {
        let tag = req.request_tag.as_str();
        if tag.ends_with("/schedule") {
            let mut d = draws.lock().unwrap();
            let mut end = raw_end.lock().unwrap();
            // Starts wander up to 40 minutes before the previous reply's end.
            let start = *end + d.below(60 * 60) as i64 - 40 * 60;
            let stop = start + 60 + d.below(90 * 60) as i64;
            *end = stop;
            return reply(
                json!({"Start_time": Timestamp::from_secs(start), "Activity": "read", "End_time": Timestamp::from_secs(stop), "Reasoning": "r"})
                    .to_string(),
            );
        }
        if tag.ends_with("/enrich") {
            return reply(
                json!({"time_stamp": "2025-02-06 08:00:00 am", "Expanded Activity": "reading"})
                    .to_string(),
            );
        }
        if tag.ends_with("/assistant") {
            return reply("Need anything?".into());
        }
        if tag.ends_with("/avatar") {
            return reply("No thanks.\nDECISION: reject".into());
        }
        reply("A resident.".into())
    });
    let tmp = tempfile::tempdir().unwrap();
    let mut opts = RunOptions::new(tmp.path(), seed);
    opts.durability = studysim::trace::Durability::Flush;
    let profiles = sample_profiles(&ProfileDistribution::adult_residents(), 1, seed).unwrap();
    let outcome = run_study(
        &cfg,
        &profiles,
        &EnvironmentConfig::one_bedroom(),
        &StudyProviders {
            assistant: &chat,
            avatar: &chat,
        },
        &opts,
    )
    .unwrap();
    let s = &outcome.subjects[0];
    check(
        failures,
        s.error.is_none(),
        format!("run {seed}: {:?}", s.error),
    );
    let schedule = &s.state.schedule;
    check(
        failures,
        schedule.len() == rounds as usize,
        format!("run {seed}: {} entries", schedule.len()),
    );
    for w in schedule.windows(2) {
        check(
            failures,
            w[1].start_time >= w[0].end_time,
            format!(
                "run {seed}: entry {} starts before {} ends",
                w[1].seq, w[0].seq
            ),
        );
    }
    for e in schedule {
        check(
            failures,
            e.end_time > e.start_time,
            format!("run {seed}: entry {} has no duration", e.seq),
        );
    }
    let clamps: Vec<&Value> = s
        .journal
        .events
        .iter()
        .filter(|(k, _)| *k == EventKind::Clamp)
        .map(|(_, v)| v)
        .collect();
    for c in &clamps {
        let prev = Timestamp::parse(c["previous_end"].as_str().unwrap()).unwrap();
        let orig = Timestamp::parse(c["original_start"].as_str().unwrap()).unwrap();
        let start = Timestamp::parse(c["start"].as_str().unwrap()).unwrap();
        check(
            failures,
            orig < prev && start == prev,
            format!("run {seed}: bad clamp {c}"),
        );
    }
    // Every entry that starts exactly at the previous end was either emitted
    // that way or clamped; clamps never outnumber them.
    let touching = schedule
        .windows(2)
        .filter(|w| w[1].start_time == w[0].end_time)
        .count();
    check(
        failures,
        clamps.len() <= touching,
        format!("run {seed}: {} clamps, {touching} touching", clamps.len()),
    );
    clamps.len()
}

#[test]
fn ac8_timestamps_and_continuity() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let corpus = timestamp_corpus();
    check(&mut failures, corpus.len() == 50, "corpus size");
    for text in &corpus {
        match Timestamp::parse(text) {
            Ok(ts) => {
                check(
                    &mut failures,
                    ts.to_string() == *text,
                    format!("`{text}` re-serialized as `{ts}`"),
                );
                let entry = json!({"Start_time": text, "Activity": "a", "End_time": Timestamp::from_secs(ts.secs() + 60), "Reasoning": "r"});
                let parsed = parse_schedule_entry(&entry.to_string()).unwrap();
                let back = serde_json::to_value(&parsed).unwrap();
                check(
                    &mut failures,
                    back["start_time"] == json!(text) || back["Start_time"] == json!(text),
                    format!("entry re-serialized `{text}` as {back}"),
                );
                // Independent reading of the instant through chrono's parser.
                let norm = text
                    .to_ascii_uppercase()
                    .replace("PM", " PM")
                    .replace("AM", " AM");
                let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
                let with_secs = if norm.matches(':').count() == 1 {
                    norm.replacen(" AM", ":00 AM", 1)
                        .replacen(" PM", ":00 PM", 1)
                } else {
                    norm
                };
                let dt = chrono::NaiveDateTime::parse_from_str(&with_secs, "%Y-%m-%d %I:%M:%S %p")
                    .unwrap();
                check(
                    &mut failures,
                    dt.and_utc().timestamp() == ts.secs(),
                    format!("`{text}` instant mismatch"),
                );
            }
            Err(e) => failures.push(format!("`{text}` rejected: {e}")),
        }
    }
    let canonical =
        Timestamp::from_secs(Timestamp::parse("2025-02-06 11:48:48 pm").unwrap().secs());
    check(
        &mut failures,
        canonical.to_string() == "2025-02-06 11:48:48 pm",
        format!("canonical form {canonical}"),
    );
    for bad in [
        "2025-02-06 13:00:00 pm",
        "2025-02-30 10:00:00 am",
        "2025-02-06 10:00:00",
        "06/02/2025 10:00 am",
    ] {
        check(
            &mut failures,
            Timestamp::parse(bad).is_err(),
            format!("`{bad}` accepted"),
        );
    }
    let mut clamps = 0;
    for seed in 0..3 {
        clamps += fuzz_continuity(seed, 100, &mut failures);
    }
    println!(
        "  {} timestamps round-tripped, {clamps} clamps traced over 300 rounds",
        corpus.len()
    );
    check(&mut failures, clamps > 0, "no clamp was exercised");
    verdict(8, &failures, start.elapsed(), Duration::from_secs(10));
}

// ---- AC9 behavioral recounts -------------------------------------------

const ACTIVITIES: [&str; 4] = ["cooking", "working", "resting", "media"];

fn fuzz_log(d: &mut Draw, n: usize) -> Vec<Turn> {
    let mut turns = Vec::with_capacity(n);
    let mut round = 0u32;
    while turns.len() < n {
        round += 1;
        let clock = 1_738_800_000 + d.below(86_400 * 3) as i64;
        let activity = ACTIVITIES[d.below(4) as usize];
        for _ in 0..d.below(6) {
            if turns.len() == n {
                break;
            }
            let speaker = if d.below(2) == 0 {
                Role::Assistant
            } else {
                Role::Avatar
            };
            let decision = match speaker {
                Role::Assistant => Decision::None,
                Role::Avatar => [
                    Decision::None,
                    Decision::Accept,
                    Decision::Reject,
                    Decision::Ignore,
                ][d.below(4) as usize],
            };
            let mut ratings = BTreeMap::new();
            if speaker == Role::Avatar && d.below(3) == 0 {
                ratings.insert("availability".to_string(), 1 + d.below(5) as i64);
            }
            turns.push(Turn {
                seq: turns.len() as u64 + 1,
                round,
                clock,
                speaker,
                text: String::new(),
                decision,
                ratings,
                actions: Vec::new(),
                activity: activity.into(),
                scenario_id: None,
            });
        }
    }
    turns
}

/// Per round: opened by its first assistant turn; the last avatar decision
/// other than `none` after it settles the outcome.
struct BruteProbe {
    activity: String,
    clock: i64,
    accepted: bool,
    availability: Option<i64>,
}

fn brute_probes(turns: &[Turn]) -> Vec<BruteProbe> {
    let rounds: BTreeSet<u32> = turns.iter().map(|t| t.round).collect();
    let mut out = Vec::new();
    for r in rounds {
        let rt: Vec<&Turn> = turns.iter().filter(|t| t.round == r).collect();
        let Some(open) = rt.iter().position(|t| t.speaker == Role::Assistant) else {
            continue;
        };
        let after = &rt[open + 1..];
        let last = after
            .iter()
            .rfind(|t| t.speaker == Role::Avatar && t.decision != Decision::None);
        let availability = after
            .iter()
            .filter(|t| t.speaker == Role::Avatar)
            .filter_map(|t| t.ratings.get("availability"))
            .next_back()
            .copied();
        out.push(BruteProbe {
            activity: rt[open].activity.clone(),
            clock: rt[open].clock,
            accepted: last.is_some_and(|t| t.decision == Decision::Accept),
            availability,
        });
    }
    out
}

#[test]
fn ac9_behavioral_recounts() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut d = Draw::new(0xac9);
    for log in 0..20 {
        let turns = fuzz_log(&mut d, 500);
        let brute = brute_probes(&turns);

        let rates = rate_by_category(&turns, |p| p.activity.clone());
        for r in &rates {
            let ps: Vec<&BruteProbe> = brute.iter().filter(|p| p.activity == r.category).collect();
            let acc = ps.iter().filter(|p| p.accepted).count() as u64;
            check(
                &mut failures,
                r.denominator == ps.len() as u64
                    && r.numerator == acc
                    && r.rate == acc as f64 / ps.len() as f64,
                format!("log {log}: rate {} {r:?} vs {acc}/{}", r.category, ps.len()),
            );
        }
        let categories: BTreeSet<&str> = brute.iter().map(|p| p.activity.as_str()).collect();
        check(
            &mut failures,
            rates.len() == categories.len(),
            format!("log {log}: category count"),
        );

        let dist = distribution_by_bucket(&turns, |p| hour_of(p.clock), Some("availability"));
        let mut expect: BTreeMap<u32, (u64, u64, Vec<f64>)> = BTreeMap::new();
        for p in &brute {
            let hour = DateTime::from_timestamp(p.clock, 0)
                .unwrap()
                .naive_utc()
                .hour();
            let e = expect.entry(hour).or_default();
            if p.accepted {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            if let Some(a) = p.availability {
                e.2.push(a as f64);
            }
        }
        check(
            &mut failures,
            dist.len() == expect.len(),
            format!("log {log}: bucket count"),
        );
        for (h, (ans, un, av)) in &expect {
            let got = &dist[h];
            let want_av = (!av.is_empty()).then(|| av.iter().sum::<f64>() / av.len() as f64);
            let av_ok = match (got.mean_availability, want_av) {
                (Some(a), Some(b)) => close(a, b, 1e-12),
                (None, None) => true,
                _ => false,
            };
            check(
                &mut failures,
                got.answered == *ans && got.unanswered == *un && av_ok,
                format!("log {log}: hour {h}: {got:?} vs ({ans}, {un}, {want_av:?})"),
            );
        }

        let ratings: Vec<(String, i64)> = turns
            .iter()
            .filter_map(|t| {
                t.ratings
                    .get("availability")
                    .map(|r| (t.activity.clone(), *r))
            })
            .collect();
        let medians = median_by_category(&ratings);
        for (cat, m) in &medians {
            let vals: Vec<f64> = ratings
                .iter()
                .filter(|(c, _)| c == cat)
                .map(|(_, r)| *r as f64)
                .collect();
            check(
                &mut failures,
                *m == brute_median(&vals),
                format!("log {log}: median {cat}"),
            );
        }

        let a: BTreeMap<String, i64> = ACTIVITIES
            .iter()
            .map(|k| (k.to_string(), 1 + d.below(9) as i64))
            .collect();
        let b: BTreeMap<String, i64> = ACTIVITIES[1..]
            .iter()
            .map(|k| (k.to_string(), 1 + d.below(9) as i64))
            .collect();
        let deltas = rank_compare(&a, &b);
        check(
            &mut failures,
            deltas.len() == 3,
            format!("log {log}: rank_compare kept {}", deltas.len()),
        );
        for (k, delta) in deltas {
            check(
                &mut failures,
                delta as i64 == (a[&k] - b[&k]).abs(),
                format!("log {log}: delta {k}"),
            );
        }
    }

    let behavioral: Value = read_json("published/behavioral.json");
    let ranks = |key: &str| -> BTreeMap<String, i64> {
        serde_json::from_value(behavioral["cs6_usefulness_rank"][key].clone()).unwrap()
    };
    let deltas: BTreeMap<String, u64> = rank_compare(&ranks("simulated"), &ranks("original"))
        .into_iter()
        .collect();
    println!("  CS6 rank shifts {deltas:?}");
    check(
        &mut failures,
        deltas["Health Risk"] == 2,
        "Health Risk delta",
    );
    check(
        &mut failures,
        deltas["Disagreement Clarification"] == 3,
        "Disagreement Clarification delta",
    );
    verdict(9, &failures, start.elapsed(), Duration::from_secs(5));
}

// ---- AC10 live smoke ---------------------------------------------------

#[test]
fn ac10_live_smoke() {
    if std::env::var_os("STUDYSIM_LIVE").is_none() {
        announce("AC10 SKIP (set STUDYSIM_LIVE to run against a live endpoint)");
        return;
    }
    use studysim::evalpipe::{run_pipeline, simulated_text, EvalProviders};
    use studysim::provider::{builtin_identities, HttpProvider, RetryPolicy};
    let start = Instant::now();
    let identity = |id: &str| {
        builtin_identities()
            .into_iter()
            .find(|i| i.id == id)
            .unwrap()
    };
    let chat_id = std::env::var("STUDYSIM_LIVE_MODEL").unwrap_or_else(|_| "gpt-4o".into());
    let chat = HttpProvider::from_env(identity(&chat_id)).expect("live chat key");
    let embedder =
        HttpProvider::from_env(identity("all-mpnet-base-v2")).expect("live embedder key");
    let cfg = load_config(&fixtures().join("studies/cs9.json")).unwrap();
    let profiles = sample_profiles(&ProfileDistribution::adult_residents(), 2, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_study(
        &cfg,
        &profiles,
        &EnvironmentConfig::one_bedroom(),
        &StudyProviders {
            assistant: &chat,
            avatar: &chat,
        },
        &RunOptions::new(tmp.path(), 1),
    )
    .unwrap();
    let mut failures = Vec::new();
    for s in &outcome.subjects {
        check(
            &mut failures,
            s.error.is_none(),
            format!("{}: {:?}", s.profile.subject_id, s.error),
        );
    }
    let run = studysim::trace::load_run(&outcome.dir).unwrap();
    let originals =
        studysim::evalpipe::load_original_findings(&fixtures().join("findings"), &cfg).unwrap();
    let out = run_pipeline(
        &cfg,
        &originals,
        &simulated_text(&run).unwrap(),
        &EvalProviders {
            chat: &chat,
            embedder: &embedder,
            policy: RetryPolicy::default(),
        },
        2,
    )
    .unwrap();
    for r in &out.results {
        println!("  rq{}: {:.3}", r.rq_index, r.similarity);
        check(
            &mut failures,
            (0.3..=1.0).contains(&r.similarity),
            format!("rq{} outside band", r.rq_index),
        );
    }
    verdict(10, &failures, start.elapsed(), Duration::from_secs(3600));
}
