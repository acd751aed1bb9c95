// Summarize, revise and embed the original and simulated findings for CS9,
// then aggregate the published per-RQ scores by theme and mode.

use std::path::Path;

use studysim::config::load_config;
use studysim::evalpipe::{
    aggregate, load_original_findings, read_similarity_csv, run_pipeline, EvalProviders, GroupBy,
};
use studysim::provider::{HashEmbedder, RetryPolicy, ScriptedChat};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let study = load_config(&fixtures.join("studies/cs9.json"))?;
    let originals = load_original_findings(&fixtures.join("findings"), &study)?;
    let simulated = "## Participant S1\nAssistant: Would you like me to turn off the TV?\nParticipant: No, leave it on.\n";

    let chat = ScriptedChat::from_file(&fixtures.join("scripts/cs9_scripted.json"))?;
    let embedder = HashEmbedder::new();
    let providers = EvalProviders {
        chat: &chat,
        embedder: &embedder,
        policy: RetryPolicy::immediate(),
    };
    let out = run_pipeline(&study, &originals, simulated, &providers, 2)?;
    for r in &out.results {
        println!("{} rq{}: {:.3}", r.study_id, r.rq_index, r.similarity);
        assert!((-1.0..=1.0).contains(&r.similarity));
    }
    assert_eq!(chat.requests().len(), 4 * study.research_questions.len());

    let published = read_similarity_csv(&fixtures.join("published/similarity_gpt4o.csv"))?;
    for group in [GroupBy::All, GroupBy::Theme, GroupBy::Mode] {
        for (k, v) in aggregate(&published, group) {
            println!("{k}: {v:.3}");
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
