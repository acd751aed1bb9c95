//! Bracket-placeholder templates for the evaluation prompts.

use crate::error::{Error, Result};

pub const SUMMARY_TEMPLATE: &str = "I am studying smart assistant behavior. Please read the synthesized activities and responses from participants in an HCI study and extract information related to the following research questions: [Research Questions]\n\nPlease structure your output with clear headings.\n\n[Activities and Conversations]";

pub const REVISION_TEMPLATE: &str = "Here is the content of a file:\n\n[Summary]\n\nKeep the meaning of the content as is, but revise it to be more general points, ignoring unnecessary detailed descriptions or examples.\n\nMake sure to keep the original meaning and context intact.";

pub const CONTINUATION_TEMPLATE: &str = "Please continue writing the following excerpt from a research paper. Continue the analysis in the same academic style and logical flow, maintaining consistency with the preceding content:\n\n[Study Data Excerpt]";

pub const EVALUATION_SYSTEM: &str = "You are a careful research assistant.";

/// Replaces each `[name]` placeholder with its value in one left-to-right
/// pass, so substituted text is never expanded again. Every name must occur.
pub fn fill(template: &str, values: &[(&str, &str)]) -> Result<String> {
    for (name, _) in values {
        if !template.contains(&format!("[{name}]")) {
            return Err(Error::Precondition(format!(
                "template has no [{name}] placeholder"
            )));
        }
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('[') {
        for (name, value) in values {
            let tag = format!("[{name}]");
            if rest[open..].starts_with(&tag) {
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &rest[open + tag.len()..];
                continue 'scan;
            }
        }
        out.push_str(&rest[..=open]);
        rest = &rest[open + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Numbered list: `(1) first\n(2) second`.
pub fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, q)| format!("({}) {q}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}
