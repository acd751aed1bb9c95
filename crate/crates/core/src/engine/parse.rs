//! Parsing model output: JSON repair, schedule and enrichment records, and
//! the avatar reply trailer.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{Map, Value};

use super::{Decision, EnrichedActivity, ScheduleEntry, Timestamp};
use crate::config::{MetricKind, StudyConfig};
use crate::context::DeviceAction;

/// Strips markdown fences and trims to the first balanced JSON object.
pub fn repair_json(raw: &str) -> Option<String> {
    let text = strip_fences(raw);
    let start = text.find('{')?;
    let bytes = text.as_bytes();
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..=i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

pub fn parse_object(raw: &str) -> Result<Map<String, Value>, String> {
    let repaired = repair_json(raw).ok_or_else(|| "no JSON object found".to_string())?;
    match serde_json::from_str::<Value>(&repaired) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err("output is not a JSON object".into()),
        Err(e) => Err(format!("invalid JSON: {e}")),
    }
}

fn text_field(obj: &Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Some(Value::String(_)) => Err(format!("key \"{key}\" is empty")),
        Some(Value::Null) | None => Err(format!("missing key \"{key}\"")),
        Some(other) => Ok(other.to_string()),
    }
}

/// Parses `{"Start_time", "Activity", "End_time", "Reasoning"}`.
pub fn parse_schedule_entry(raw: &str) -> Result<ScheduleEntry, String> {
    let obj = parse_object(raw)?;
    let start_time = Timestamp::parse(&text_field(&obj, "Start_time")?)?;
    let end_time = Timestamp::parse(&text_field(&obj, "End_time")?)?;
    if end_time <= start_time {
        return Err(format!(
            "End_time {end_time} is not after Start_time {start_time}"
        ));
    }
    Ok(ScheduleEntry {
        seq: 0,
        start_time,
        end_time,
        activity: text_field(&obj, "Activity")?,
        reasoning: text_field(&obj, "Reasoning")?,
    })
}

/// Parses `{"time_stamp", "Expanded Activity"}`.
pub fn parse_enrichment(raw: &str) -> Result<EnrichedActivity, String> {
    let obj = parse_object(raw)?;
    Ok(EnrichedActivity {
        seq: 0,
        time_stamp: Timestamp::parse(&text_field(&obj, "time_stamp")?)?,
        expanded: text_field(&obj, "Expanded Activity")?,
    })
}

/// The parts of an avatar (or assistant) reply.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reply {
    /// Spoken text with all trailer lines removed.
    pub text: String,
    pub decision: Option<Decision>,
    pub ratings: BTreeMap<String, i64>,
    pub actions: Vec<DeviceAction>,
    pub notes: Vec<String>,
    /// Trailer lines that looked like directives but did not parse.
    pub malformed: Vec<String>,
}

fn trailer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*\**(DECISION|RATING\s*\[([^\]]*)\]|ACTION|NOTE)\**\s*:\s*(.*?)\s*$")
            .expect("valid regex")
    })
}

/// Splits a reply into speech and `DECISION:` / `RATING[id]:` / `ACTION:` /
/// `NOTE:` directives. Directive lines may appear anywhere.
pub fn parse_reply(raw: &str) -> Reply {
    let mut reply = Reply::default();
    let mut speech = Vec::new();
    for line in raw.lines() {
        let Some(caps) = trailer().captures(line) else {
            speech.push(line);
            continue;
        };
        let head = caps[1].to_ascii_uppercase();
        let body = caps[3].trim();
        if head == "DECISION" {
            match body
                .trim_matches(|c: char| !c.is_alphabetic())
                .to_ascii_lowercase()
                .as_str()
            {
                "accept" => reply.decision = Some(Decision::Accept),
                "reject" => reply.decision = Some(Decision::Reject),
                "ignore" => reply.decision = Some(Decision::Ignore),
                "none" => reply.decision = Some(Decision::None),
                _ => reply.malformed.push(line.trim().to_string()),
            }
        } else if head.starts_with("RATING") {
            let key = caps[2].trim().to_string();
            match body.parse::<i64>() {
                Ok(v) if !key.is_empty() => {
                    reply.ratings.insert(key, v);
                }
                _ => reply.malformed.push(line.trim().to_string()),
            }
        } else if head == "ACTION" {
            let parts: Vec<&str> = body.split('|').map(str::trim).collect();
            match parts.as_slice() {
                [d, a] if !d.is_empty() && !a.is_empty() => {
                    reply.actions.push(DeviceAction::new(*d, *a))
                }
                [d, a, v] if !d.is_empty() && !a.is_empty() => {
                    let action = DeviceAction::new(*d, *a);
                    reply.actions.push(if v.is_empty() {
                        action
                    } else {
                        action.with_value(*v)
                    });
                }
                _ => reply.malformed.push(line.trim().to_string()),
            }
        } else if !body.is_empty() {
            reply.notes.push(body.to_string());
        }
    }
    reply.text = speech
        .join("\n")
        .trim()
        .trim_matches('"')
        .trim()
        .to_string();
    reply
}

/// Rating keys a reply must carry for `metric_id`: `id` for scalar metrics,
/// `id/item` for itemized ones.
pub fn required_rating_keys(study: &StudyConfig, metric_id: &str) -> Vec<String> {
    match study.metric(metric_id) {
        None => Vec::new(),
        Some(m) => {
            let items = m.rated_items();
            if items.is_empty() {
                vec![metric_id.to_string()]
            } else {
                items.iter().map(|i| format!("{metric_id}/{i}")).collect()
            }
        }
    }
}

/// Checks that every required rating is present and within its metric's bounds.
/// Ratings for unrequested metrics are dropped.
pub fn check_ratings(
    study: &StudyConfig,
    required: &[String],
    ratings: &BTreeMap<String, i64>,
) -> Result<BTreeMap<String, i64>, String> {
    let mut out = BTreeMap::new();
    for key in required {
        let metric_id = key.split('/').next().unwrap_or(key);
        let metric = study
            .metric(metric_id)
            .ok_or_else(|| format!("unknown metric `{metric_id}`"))?;
        let value = *ratings
            .get(key)
            .ok_or_else(|| format!("missing RATING[{key}]"))?;
        let (lo, hi) = metric
            .rating_bounds()
            .ok_or_else(|| format!("metric `{metric_id}` cannot be rated"))?;
        if !(lo..=hi).contains(&value) {
            return Err(format!("RATING[{key}] = {value} is outside [{lo}, {hi}]"));
        }
        out.insert(key.clone(), value);
    }
    let rankings: Vec<&str> = required
        .iter()
        .filter_map(|k| k.split_once('/').map(|(m, _)| m))
        .filter(|m| {
            study
                .metric(m)
                .is_some_and(|s| s.kind == MetricKind::Ranking)
        })
        .collect();
    for m in rankings {
        let mut seen = std::collections::BTreeSet::new();
        for (k, v) in &out {
            if k.starts_with(&format!("{m}/")) && !seen.insert(*v) {
                return Err(format!("ranking `{m}` repeats rank {v}"));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CLEAN: &str = r#"{"Start_time": "2025-02-06 12:10:00 pm", "Activity": "walk to the living room", "End_time": "2025-02-06 12:30:00 pm", "Reasoning": "I want to relax."}"#;

    #[test]
    fn fenced_json_repairs_to_clean_parse() {
        let fenced = format!("```json\n{CLEAN}\n```");
        assert_eq!(
            parse_schedule_entry(&fenced).unwrap(),
            parse_schedule_entry(CLEAN).unwrap()
        );
        let chatty = format!("Sure! Here it is:\n{CLEAN}\nHope that helps {{:}}");
        assert_eq!(
            parse_schedule_entry(&chatty).unwrap(),
            parse_schedule_entry(CLEAN).unwrap()
        );
    }

    #[test]
    fn braces_inside_strings() {
        let raw = r#"noise {"a": "x } y", "b": {"c": 1}} trailing }"#;
        assert_eq!(
            repair_json(raw).unwrap(),
            r#"{"a": "x } y", "b": {"c": 1}}"#
        );
        assert!(repair_json("{ unterminated").is_none());
    }

    #[test]
    fn schedule_fields() {
        let e = parse_schedule_entry(CLEAN).unwrap();
        assert_eq!(e.activity, "walk to the living room");
        assert_eq!(e.start_time.as_str(), "2025-02-06 12:10:00 pm");
        let inverted = CLEAN.replace("12:30:00 pm", "12:00:00 pm");
        assert!(parse_schedule_entry(&inverted).is_err());
    }

    #[test]
    fn enrichment_requires_both_keys() {
        let ok =
            r#"{"time_stamp": "2025-02-06 12:10:00 pm", "Expanded Activity": "She stretches."}"#;
        assert_eq!(parse_enrichment(ok).unwrap().expanded, "She stretches.");
        let missing = r#"{"time_stamp": "2025-02-06 12:10:00 pm"}"#;
        assert!(parse_enrichment(missing)
            .unwrap_err()
            .contains("Expanded Activity"));
    }

    #[test]
    fn reply_trailer() {
        let r = parse_reply(
            "Sure, go ahead.\nDECISION: accept\nRATING[availability]: 4\nACTION: ceiling light|turn on\nACTION: floor lamp|adjust brightness|40\nNOTE: feeling tired",
        );
        assert_eq!(r.text, "Sure, go ahead.");
        assert_eq!(r.decision, Some(Decision::Accept));
        assert_eq!(r.ratings["availability"], 4);
        assert_eq!(r.actions.len(), 2);
        assert_eq!(r.actions[1].value.as_deref(), Some("40"));
        assert_eq!(r.notes, ["feeling tired"]);
        let bad = parse_reply("hm\nDECISION: maybe");
        assert_eq!(bad.decision, None);
        assert_eq!(bad.malformed.len(), 1);
        assert_eq!(
            parse_reply("**Decision:** Reject").decision,
            Some(Decision::Reject)
        );
    }
}
