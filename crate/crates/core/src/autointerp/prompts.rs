use crate::error::{Error, Result};
use crate::harness::{MaxActEntry, MaxActRecord};

use super::CategorySet;

pub const INTERPRET_TEMPLATE: &str = include_str!("prompts/interpret.txt");
pub const CATEGORIES_TEMPLATE: &str = include_str!("prompts/categories.txt");
pub const CATEGORIZE_TEMPLATE: &str = include_str!("prompts/categorize.txt");

/// Expands a template with Python `str.format` conventions: a backslash at
/// end of line joins it to the next, `{{`/`}}` are literal braces and
/// `{name}` is looked up in `slots`.
pub fn render_template(template: &str, slots: &[(&str, &str)]) -> Result<String> {
    let joined = template.replace("\\\n", "");
    let mut out = String::with_capacity(joined.len());
    let mut chars = joined.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let value = slots.iter().find(|(k, _)| *k == name).ok_or_else(|| {
                    Error::contract(format!("no value for template slot {{{name}}}"))
                })?;
                out.push_str(value.1);
            }
            '}' => return Err(Error::contract("unmatched '}' in template")),
            c => out.push(c),
        }
    }
    Ok(out)
}

/// `value × 10 / max_abs` rendered with two decimals.
pub fn rescale(value: f32, max_abs: f32) -> String {
    if max_abs == 0.0 {
        return "0.00".into();
    }
    format!("{:.2}", value as f64 * 10.0 / max_abs as f64)
}

fn context_text(entry: &MaxActEntry) -> String {
    entry
        .context
        .iter()
        .map(|c| c.tok.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// One block per entry: the context text, then each token whose rescaled
/// activation is nonzero at two decimals, strongest first.
pub fn activations_str(record: &MaxActRecord) -> String {
    let max_abs = record.max_abs();
    let mut blocks = Vec::with_capacity(record.entries.len());
    for entry in &record.entries {
        let mut lines = vec![context_text(entry)];
        let mut fired: Vec<_> = entry
            .context
            .iter()
            .filter(|c| !matches!(rescale(c.act, max_abs).as_str(), "0.00" | "-0.00"))
            .collect();
        fired.sort_by(|a, b| b.act.abs().total_cmp(&a.act.abs()).then(a.pos.cmp(&b.pos)));
        lines.extend(
            fired
                .iter()
                .map(|c| format!("{} {}", c.tok, rescale(c.act, max_abs))),
        );
        blocks.push(lines.join("\n"));
    }
    blocks.join("\n\n")
}

pub fn build_interp_prompt(record: &MaxActRecord) -> Result<String> {
    if record.entries.is_empty() {
        return Err(Error::contract(format!(
            "no max-activating examples for {}",
            record.name
        )));
    }
    render_template(
        INTERPRET_TEMPLATE,
        &[("activations_str", &activations_str(record))],
    )
}

pub fn build_categories_prompt(explanations: &[String]) -> Result<String> {
    let list: Vec<String> = explanations.iter().map(|e| format!("- {e}")).collect();
    render_template(CATEGORIES_TEMPLATE, &[("feature_list", &list.join("\n"))])
}

/// Up to `max_examples` contexts, each followed by its peak token.
pub fn examples_str(record: &MaxActRecord, max_examples: usize) -> String {
    let max_abs = record.max_abs();
    record
        .entries
        .iter()
        .take(max_examples)
        .map(|e| {
            let peak = e
                .context
                .iter()
                .find(|c| c.pos == e.pos)
                .map(|c| c.tok.as_str())
                .unwrap_or("");
            format!(
                "- {} (peak: {} {})",
                context_text(e),
                peak,
                rescale(e.activation, max_abs)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn categories_str(categories: &CategorySet) -> String {
    categories
        .categories
        .iter()
        .map(|c| format!("- {} ({}): {}", c.string_id, c.name, c.definition))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_categorize_prompt(
    explanation: &str,
    examples: &str,
    categories: &CategorySet,
) -> Result<String> {
    render_template(
        CATEGORIZE_TEMPLATE,
        &[
            ("feature.explanation", explanation),
            ("examples_str", examples),
            ("categories_str", &categories_str(categories)),
        ],
    )
}
