use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::json;

use studysim::context::{sample_profiles, ProfileDistribution};
use studysim::engine::{redact, Timestamp};
use studysim::leakage::strip_numerals;
use studysim::metrics::{cosine, ranks_from_scores, welch_t_test};
use studysim::provider::glob_match;
use studysim::trace::{read_stream, EventKind, StreamWriter, TraceEvent};

proptest! {
    #[test]
    fn redact_leaves_no_forbidden_string(
        text in "[a-cA-C /]{0,60}",
        forbidden in prop::collection::vec("[a-cA-C/]{1,4}", 0..5),
    ) {
        let refs: Vec<&str> = forbidden.iter().map(String::as_str).collect();
        let out = redact(&text, &refs);
        for f in &refs {
            prop_assert!(!out.contains(f), "{out:?} still holds {f:?}");
        }
        prop_assert!(out.len() <= text.len());
    }

    #[test]
    fn redact_without_hits_is_identity(text in "[a-z ]{0,40}") {
        prop_assert_eq!(redact(&text, &["0", "XYZ"]), text);
    }

    #[test]
    fn strip_numerals_removes_every_digit(text in "[a-z0-9 .,%-]{0,80}") {
        let out = strip_numerals(&text);
        let bare = out.replace("[n]", "");
        prop_assert!(!bare.chars().any(|c| c.is_ascii_digit()), "{out:?}");
        let letters = |s: &str| s.chars().filter(|c| c.is_ascii_alphabetic()).collect::<String>();
        prop_assert_eq!(letters(&bare), letters(&text));
    }

    #[test]
    fn timestamps_round_trip(secs in 0i64..4_102_444_800) {
        let t = Timestamp::from_secs(secs);
        let back = Timestamp::parse(t.as_str()).unwrap();
        prop_assert_eq!(back.secs(), secs);
        prop_assert_eq!(back.as_str(), t.as_str());
    }

    #[test]
    fn glob_literal_and_star(text in "[a-z/0-9]{0,20}", prefix_len in 0usize..20) {
        prop_assert!(glob_match(&text, &text));
        prop_assert!(glob_match("*", &text));
        let cut = prefix_len.min(text.len());
        let pattern = format!("{}*", &text[..cut]);
        prop_assert!(glob_match(&pattern, &text));
        let other = format!("{text}x");
        prop_assert!(!glob_match(&text, &other));
    }

    #[test]
    fn ranks_count_strictly_better_items(scores in prop::collection::vec(0u8..6, 1..12)) {
        let map: BTreeMap<String, f64> =
            scores.iter().enumerate().map(|(i, s)| (format!("item{i:02}"), f64::from(*s))).collect();
        let ranks = ranks_from_scores(&map);
        for (item, s) in &map {
            let better = map.values().filter(|o| *o > s).count() as i64;
            prop_assert_eq!(ranks[item], better + 1);
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..16)
            .prop_filter("non-zero", |v| v.iter().any(|(a, _)| a.abs() > 1e-3) && v.iter().any(|(_, b)| b.abs() > 1e-3)),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let ab = cosine(&a, &b).unwrap();
        let ba = cosine(&b, &a).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn welch_p_is_a_probability_and_swap_invariant(
        xs in prop::collection::vec(0.0f64..1.0, 3..20),
        ys in prop::collection::vec(0.0f64..1.0, 3..20),
    ) {
        let (Ok(a), Ok(b)) = (welch_t_test(&xs, &ys), welch_t_test(&ys, &xs)) else {
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&a.p_value));
        prop_assert!((a.p_value - b.p_value).abs() < 1e-9);
        prop_assert!((a.t_statistic + b.t_statistic).abs() < 1e-9);
    }

    #[test]
    fn sampled_profiles_stay_in_range(seed in any::<u64>(), n in 1usize..8) {
        let dist = ProfileDistribution::adult_residents();
        let a = sample_profiles(&dist, n, seed).unwrap();
        prop_assert_eq!(&a, &sample_profiles(&dist, n, seed).unwrap());
        for p in &a {
            prop_assert!((18..=70).contains(&p.age));
            prop_assert!(p.tipi.is_valid());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn streams_read_back_byte_for_byte(texts in prop::collection::vec(".{0,40}", 1..1000)) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("transcript.jsonl");
        let mut w = StreamWriter::create(&path, "transcript").unwrap();
        let written: Vec<TraceEvent> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| TraceEvent::new(i as u64 + 1, EventKind::Turn, json!({"text": t, "turn": i})))
            .collect();
        for e in &written {
            w.append(e).unwrap();
        }
        drop(w);
        let back = read_stream(&path, "transcript").unwrap();
        prop_assert_eq!(&back, &written);
        let lines: String = written.iter().map(|e| e.to_line() + "\n").collect();
        prop_assert_eq!(std::fs::read_to_string(&path).unwrap(), lines);
    }
}
