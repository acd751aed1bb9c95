// Reloads a finished run from disk and walks one subject's transcript.

use std::path::Path;

use studysim::config::load_config;
use studysim::context::{sample_profiles, EnvironmentConfig, ProfileDistribution};
use studysim::engine::{run_study, RunOptions, StudyProviders};
use studysim::provider::ScriptedChat;
use studysim::trace::{load_run, TRANSCRIPT};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let study = load_config(&fixtures.join("studies/cs9.json"))?;
    let profiles = sample_profiles(&ProfileDistribution::adult_residents(), 2, 1)?;
    let chat = ScriptedChat::from_file(&fixtures.join("scripts/cs9_scripted.json"))?;
    let tmp = tempfile::tempdir()?;
    let outcome = run_study(
        &study,
        &profiles,
        &EnvironmentConfig::one_bedroom(),
        &StudyProviders {
            assistant: &chat,
            avatar: &chat,
        },
        &RunOptions::new(tmp.path(), 1),
    )?;

    let run = load_run(&outcome.dir)?;
    assert_eq!(run.manifest.subjects.len(), 2);
    for event in run.stream("S1", TRANSCRIPT) {
        let speaker = event.payload["speaker"].as_str().unwrap_or("?");
        let text = event.payload["text"].as_str().unwrap_or("");
        println!("#{} {speaker}: {text}", event.seq);
    }

    // A stray line breaks the stream's sequence and event count.
    let path = run.subject_dir("S1").join("transcript.jsonl");
    let mut bytes = std::fs::read(&path)?;
    bytes.extend_from_slice(b"{\"seq\":99}\n");
    std::fs::write(&path, bytes)?;
    let err = load_run(&outcome.dir).unwrap_err();
    println!("after tampering: {err}");
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
