// Behavioral comparisons on published numbers: a paired t-test, rank
// shifts between two usefulness orderings and median agreement.

use std::collections::BTreeMap;
use std::path::Path;

use studysim::metrics::{paired_t_test, rank_compare, welch_t_test};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    // Self ratings against ratings for an imagined assistant, 15 subjects.
    let self_ratings = [
        3.0, 4.5, 2.5, 5.0, 3.5, 4.0, 2.0, 3.0, 4.5, 3.5, 5.5, 2.5, 4.0, 3.0, 3.5,
    ];
    let ideal = [
        5.5, 6.0, 5.0, 6.5, 5.0, 5.5, 4.5, 5.5, 6.0, 5.0, 6.0, 4.5, 6.0, 5.5, 5.0,
    ];
    let t = paired_t_test(&self_ratings, &ideal)?;
    println!(
        "paired: t({}) = {:.2}, p = {:.4}",
        t.degrees_of_freedom, t.t_statistic, t.p_value
    );
    assert!(t.t_statistic < 0.0 && t.p_value < 0.001);

    let published: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/published/behavioral.json"),
    )?)?;
    let ranks = |key: &str| -> BTreeMap<String, i64> {
        serde_json::from_value(published["cs6_usefulness_rank"][key].clone()).unwrap()
    };
    let (sim, orig) = (ranks("simulated"), ranks("original"));
    for (item, delta) in rank_compare(&sim, &orig) {
        if delta > 0 {
            println!("{item}: moved {delta}");
        }
    }

    let medians = &published["cs8_median_impression"];
    let sim: Vec<f64> = medians["simulated"]
        .as_object()
        .unwrap()
        .values()
        .filter_map(|v| v.as_f64())
        .collect();
    let orig: Vec<f64> = medians["original"]
        .as_object()
        .unwrap()
        .values()
        .filter_map(|v| v.as_f64())
        .collect();
    let same = sim.iter().zip(&orig).filter(|(a, b)| a == b).count();
    println!("{same} of {} medians agree", sim.len());
    let w = welch_t_test(&sim, &orig)?;
    println!("welch on medians: p = {:.2}", w.p_value);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
