// Both leakage checks on published scores, plus a scripted continuation
// probe of one excerpt.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use studysim::config::load_config;
use studysim::leakage::{
    builtin_cutoffs, continuation_probe, method1_test, method2_score, method2_test, strip_numerals,
    temporal_split, Method2Score, CONTINUATION_RUNS,
};
use studysim::provider::{HashEmbedder, RetryPolicy, ScriptedChat};

type Scores<T> = BTreeMap<String, BTreeMap<String, T>>;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut dates: Vec<(String, NaiveDate)> = Vec::new();
    for entry in std::fs::read_dir(fixtures.join("studies"))? {
        let cfg = load_config(&entry?.path())?;
        dates.push((cfg.study_id, cfg.publication_date));
    }
    dates.sort();
    let m1: Scores<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(
        fixtures.join("published/method1.json"),
    )?)?;
    let m2: Scores<f64> = serde_json::from_str(&std::fs::read_to_string(
        fixtures.join("published/method2.json"),
    )?)?;

    for cutoff in builtin_cutoffs() {
        let Some(scores) = m1.get(&cutoff.model_id) else {
            continue;
        };
        let split = temporal_split(&dates, cutoff.knowledge_cutoff);
        let r1 = method1_test(&cutoff.model_id, scores, &split)?;
        let averages: BTreeMap<String, Method2Score> = m2[&cutoff.model_id]
            .iter()
            .map(|(k, v)| (k.clone(), Method2Score::from_average(*v)))
            .collect();
        let r2 = method2_test(&cutoff.model_id, &averages, &split)?;
        println!(
            "{}: controlled {:?}, temporal p = {:.2}, continuation p = {:.2}",
            cutoff.model_id, split.controlled, r1.t_test.p_value, r2.t_test.p_value
        );
    }

    let excerpt = std::fs::read_to_string(fixtures.join("excerpts/CS2.txt"))?;
    let stripped = strip_numerals(&excerpt);
    assert!(!stripped.chars().any(|c| c.is_ascii_digit()));
    let chat = ScriptedChat::from_file(&fixtures.join("scripts/cs9_scripted.json"))?;
    let policy = RetryPolicy::immediate();
    let runs = continuation_probe(&stripped, "CS2", &chat, CONTINUATION_RUNS, &policy)?;
    let original = std::fs::read_to_string(fixtures.join("findings/CS2/rq1.original.txt"))?;
    let score = method2_score(&runs, &original, &HashEmbedder::new(), &policy)?;
    println!(
        "CS2 continuation: average {:.3}, max {:.3}, verbatim {}",
        score.average, score.max, score.verbatim
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
