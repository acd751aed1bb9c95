// Loads every bundled study config and shows what a broken one reports.

use std::path::Path;

use studysim::config::{load_config, parse_config, validate_config};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/studies");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let cfg = load_config(&entry?.path())?;
        let violations = validate_config(&cfg);
        assert!(violations.is_empty(), "{}: {violations:?}", cfg.study_id);
        ids.push(cfg.study_id);
    }
    ids.sort();
    println!("{} valid configs: {}", ids.len(), ids.join(", "));
    assert_eq!(ids.len(), 10);

    // Drop the research questions from CS9 and validate again.
    let text = std::fs::read_to_string(dir.join("cs9.json"))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    value["research_questions"] = serde_json::json!([]);
    let err = parse_config(&value.to_string()).unwrap_err();
    println!("broken config: {err}");
    assert!(
        matches!(err, studysim::Error::Schema { ref field, .. } if field == "research_questions")
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
