// Runs CS9 end to end against a replay script, twice, and checks that both
// run directories hold the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use studysim::config::load_config;
use studysim::context::{sample_profiles, EnvironmentConfig, ProfileDistribution};
use studysim::engine::{run_study, RunOptions, StudyProviders};
use studysim::provider::ScriptedChat;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

fn files(dir: &Path) -> std::io::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p)?,
                );
            }
        }
    }
    Ok(out)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let study = load_config(&fixture("studies/cs9.json"))?;
    let env = EnvironmentConfig::load(&fixture("environment/one_bedroom.json"))?;
    let profiles = sample_profiles(&ProfileDistribution::adult_residents(), 3, 7)?;

    let mut dirs = Vec::new();
    let tmp = tempfile::tempdir()?;
    for attempt in 0..2 {
        let chat = ScriptedChat::from_file(&fixture("scripts/cs9_scripted.json"))?;
        let providers = StudyProviders {
            assistant: &chat,
            avatar: &chat,
        };
        let opts = RunOptions::new(tmp.path().join(format!("attempt{attempt}")), 7);
        let outcome = run_study(&study, &profiles, &env, &providers, &opts)?;
        println!(
            "{} -> {:?}",
            outcome.dir.display(),
            outcome.manifest.status_counts()
        );
        for s in &outcome.subjects {
            println!(
                "  {} {} turns",
                s.profile.subject_id,
                s.state.transcript.len()
            );
        }
        dirs.push(outcome.dir);
    }
    assert_eq!(dirs[0].file_name(), dirs[1].file_name());
    assert_eq!(files(&dirs[0])?, files(&dirs[1])?);
    println!("both runs are byte-identical");
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
