// Seeded persona sampling. The same seed always yields the same profiles.

use std::path::Path;

use studysim::context::{sample_profiles, ProfileDistribution};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/distributions/cs1_placeholder.json");
    let dist = ProfileDistribution::load(&path)?;
    if let Some(note) = &dist.note {
        println!("note: {note}");
    }
    let a = sample_profiles(&dist, 5, 42)?;
    let b = sample_profiles(&dist, 5, 42)?;
    assert_eq!(a, b);
    for p in &a {
        assert!((19..=35).contains(&p.age));
        println!(
            "{} age {} {} ({}), extraversion {:.1}",
            p.subject_id, p.age, p.gender, p.household_type, p.tipi.extraversion
        );
    }
    let other = sample_profiles(&dist, 5, 43)?;
    assert_ne!(a, other);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
