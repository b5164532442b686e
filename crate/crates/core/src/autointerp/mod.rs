//! LLM autointerpretation: explanations with a 0/1/2 monosemanticity class,
//! category generation, per-feature categorization and activation densities.

mod client;
mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{ActivationDump, MaxActRecord};
use crate::io;

pub use client::{
    EndpointConfig, EndpointKind, HttpClient, LlmClient, MockClient, ScriptedClient,
    MOCK_CATEGORIES, TOKEN_ENV,
};
pub use prompts::{
    activations_str, build_categories_prompt, build_categorize_prompt, build_interp_prompt,
    categories_str, examples_str, render_template, rescale, CATEGORIES_TEMPLATE,
    CATEGORIZE_TEMPLATE, INTERPRET_TEMPLATE,
};

pub const UNCATEGORIZED: &str = "uncategorized";

/// Class-0 fractions reported at full scale, shown next to desk-scale numbers.
pub const REFERENCE_CLASS0_SAE: f64 = 0.62;
pub const REFERENCE_CLASS0_LORA: f64 = 0.22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpResult {
    pub explanation: String,
    pub classification: u8,
    pub classification_reasoning: String,
}

/// One line of `interp.jsonl`: a parsed result or the reason there is none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpRecord {
    pub id: usize,
    pub name: String,
    pub dump_hash: String,
    pub result: Option<InterpResult>,
    pub error: Option<String>,
}

/// Extracts the outermost `{...}` span, tolerating code fences or prose around it.
fn json_object(text: &str) -> Result<serde_json::Value> {
    let start = text.find('{');
    let end = text.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => serde_json::from_str(&text[s..=e])
            .map_err(|err| Error::Malformed(format!("invalid JSON: {err}"))),
        _ => Err(Error::Malformed("no JSON object in response".into())),
    }
}

pub fn parse_interp_response(text: &str) -> Result<InterpResult> {
    let v = json_object(text)?;
    let explanation = v["explanation"]
        .as_str()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Malformed("missing or empty explanation".into()))?;
    let classification = v["classification"]
        .as_u64()
        .filter(|&c| c <= 2)
        .ok_or_else(|| {
            Error::Malformed(format!(
                "classification must be 0, 1 or 2, got {}",
                v["classification"]
            ))
        })?;
    Ok(InterpResult {
        explanation: explanation.to_string(),
        classification: classification as u8,
        classification_reasoning: v["classification_reasoning"]
            .as_str()
            .unwrap_or_default()
            .to_string(),
    })
}

/// Up to `attempts` tries; endpoint failures and malformed replies both
/// consume an attempt.
pub fn interpret(
    record: &MaxActRecord,
    client: &dyn LlmClient,
    endpoint: &EndpointConfig,
) -> Result<InterpResult> {
    let prompt = build_interp_prompt(record)?;
    let mut last = Error::Malformed("no attempts made".into());
    for attempt in 0..endpoint.attempts.max(1) {
        match client
            .complete(&prompt)
            .and_then(|r| parse_interp_response(&r))
        {
            Ok(r) => return Ok(r),
            Err(e @ (Error::Endpoint(_) | Error::Malformed(_))) => {
                log::warn!("{}: attempt {} failed: {e}", record.name, attempt + 1);
                if matches!(e, Error::Endpoint(_)) && attempt + 1 < endpoint.attempts {
                    std::thread::sleep(std::time::Duration::from_millis(
                        endpoint.backoff_ms << attempt,
                    ));
                }
                last = e;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Interprets every record not already cached for `dump_hash`, with at most
/// `max_in_flight` concurrent requests. Returns records ordered by id; new
/// records are appended to the cache file.
pub fn interpret_all(
    records: &[MaxActRecord],
    dump_hash: &str,
    client: &dyn LlmClient,
    endpoint: &EndpointConfig,
    cache_path: &Path,
) -> Result<Vec<InterpRecord>> {
    let mut cached: BTreeMap<usize, InterpRecord> = BTreeMap::new();
    if cache_path.exists() {
        for r in io::read_jsonl::<InterpRecord>(cache_path)? {
            if r.dump_hash == dump_hash {
                cached.insert(r.id, r);
            }
        }
    }
    let todo: Vec<&MaxActRecord> = records
        .iter()
        .filter(|r| !cached.contains_key(&r.direction))
        .collect();
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..endpoint.max_in_flight.clamp(1, todo.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rec) = todo.get(i) else { break };
                let (result, error) = match interpret(rec, client, endpoint) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                done.lock().expect("result lock").push(InterpRecord {
                    id: rec.direction,
                    name: rec.name.clone(),
                    dump_hash: dump_hash.to_string(),
                    result,
                    error,
                });
            });
        }
    });
    let mut fresh = done.into_inner().expect("result lock");
    fresh.sort_by_key(|r| r.id);
    if !fresh.is_empty() {
        let mut all: Vec<InterpRecord> = if cache_path.exists() {
            io::read_jsonl(cache_path)?
        } else {
            Vec::new()
        };
        all.extend(fresh.iter().cloned());
        io::write_jsonl(cache_path, &all)?;
    }
    for r in fresh {
        cached.insert(r.id, r);
    }
    let wanted: BTreeSet<usize> = records.iter().map(|r| r.direction).collect();
    Ok(cached
        .into_values()
        .filter(|r| wanted.contains(&r.id))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub string_id: String,
    pub name: String,
    pub definition: String,
    #[serde(default)]
    pub examples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySet {
    pub categories: Vec<Category>,
    #[serde(default)]
    pub summary: String,
}

impl CategorySet {
    pub fn validate(&self) -> Result<()> {
        let n = self.categories.len();
        if !(5..=8).contains(&n) {
            return Err(Error::Malformed(format!("{n} categories, expected 5 to 8")));
        }
        let mut seen = BTreeSet::new();
        for c in &self.categories {
            if c.string_id.trim().is_empty() {
                return Err(Error::Malformed("empty category string_id".into()));
            }
            if c.string_id == UNCATEGORIZED {
                return Err(Error::Malformed(format!("{UNCATEGORIZED:?} is reserved")));
            }
            if !seen.insert(c.string_id.as_str()) {
                return Err(Error::Malformed(format!(
                    "duplicate string_id {:?}",
                    c.string_id
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.categories.iter().any(|c| c.string_id == id)
    }
}

pub fn parse_categories_response(text: &str) -> Result<CategorySet> {
    let set: CategorySet = serde_json::from_value(json_object(text)?)
        .map_err(|e| Error::Malformed(format!("category JSON: {e}")))?;
    set.validate()?;
    Ok(set)
}

/// Issues the category prompt, reprompting once on an invalid reply.
pub fn generate_categories(
    explanations: &[String],
    client: &dyn LlmClient,
    endpoint: &EndpointConfig,
) -> Result<CategorySet> {
    if explanations.len() < 10 {
        return Err(Error::contract(format!(
            "category generation needs at least 10 explanations, got {}",
            explanations.len()
        )));
    }
    let prompt = build_categories_prompt(explanations)?;
    let mut last = None;
    for _ in 0..2 {
        let reply = endpoint.with_retries(|| client.complete(&prompt))?;
        match parse_categories_response(&reply) {
            Ok(set) => return Ok(set),
            Err(e) => {
                log::warn!("rejected category reply: {e}");
                last = Some(e);
            }
        }
    }
    Err(last.expect("two attempts"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryAssignment {
    pub id: usize,
    pub category: String,
}

/// Strict match of the trimmed reply against the category ids, reprompting
/// once; falls back to [`UNCATEGORIZED`].
pub fn categorize(
    explanation: &str,
    examples: &str,
    categories: &CategorySet,
    client: &dyn LlmClient,
    endpoint: &EndpointConfig,
) -> Result<String> {
    let prompt = build_categorize_prompt(explanation, examples, categories)?;
    for _ in 0..2 {
        let reply = endpoint.with_retries(|| client.complete(&prompt))?;
        let id = reply.trim();
        if categories.contains(id) {
            return Ok(id.to_string());
        }
        log::warn!("category reply {id:?} is not a known string_id");
    }
    Ok(UNCATEGORIZED.to_string())
}

/// Categorizes every feature in id order; features without an interpretation
/// go to [`UNCATEGORIZED`] without a request.
pub fn categorize_all(
    interps: &[InterpRecord],
    records: &[MaxActRecord],
    categories: &CategorySet,
    client: &dyn LlmClient,
    endpoint: &EndpointConfig,
) -> Result<Vec<CategoryAssignment>> {
    let by_id: BTreeMap<usize, &MaxActRecord> = records.iter().map(|r| (r.direction, r)).collect();
    let mut out = Vec::new();
    for rec in interps {
        let (Some(res), Some(mar)) = (&rec.result, by_id.get(&rec.id)) else {
            out.push(CategoryAssignment {
                id: rec.id,
                category: UNCATEGORIZED.to_string(),
            });
            continue;
        };
        let category = categorize(
            &res.explanation,
            &examples_str(mar, 5),
            categories,
            client,
            endpoint,
        )?;
        out.push(CategoryAssignment {
            id: rec.id,
            category,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryDensity {
    pub category: String,
    pub activation: f64,
    pub percent: f64,
}

/// Rows of the trailing `fraction` of sequences (by sequence id).
pub fn held_out_rows(dump: &ActivationDump, fraction: f64) -> Vec<usize> {
    let n_seq = dump.tokens.iter().map(|t| t.seq + 1).max().unwrap_or(0);
    let keep = ((n_seq as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let first = n_seq - keep.min(n_seq);
    (0..dump.n_tokens())
        .filter(|&r| dump.tokens[r].seq >= first)
        .collect()
}

/// Total activation of each direction over `rows`.
pub fn activation_mass(dump: &ActivationDump, rows: &[usize]) -> Vec<f64> {
    let mut mass = vec![0.0f64; dump.d()];
    for &r in rows {
        for (m, &v) in mass.iter_mut().zip(dump.activations.row(r)) {
            *m += v as f64;
        }
    }
    mass
}

/// Share of total activation mass per category, in percent, sorted by id.
pub fn category_density(
    assignments: &[CategoryAssignment],
    mass: &[f64],
) -> Result<Vec<CategoryDensity>> {
    let assigned: BTreeMap<usize, &str> = assignments
        .iter()
        .map(|a| (a.id, a.category.as_str()))
        .collect();
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for (id, &m) in mass.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        if m < 0.0 || !m.is_finite() {
            return Err(Error::contract(format!(
                "feature {id} has activation mass {m}"
            )));
        }
        let cat = assigned.get(&id).ok_or_else(|| {
            Error::contract(format!("feature {id} has activation but no category"))
        })?;
        *sums.entry(cat).or_default() += m;
    }
    for a in assignments {
        sums.entry(a.category.as_str()).or_default();
    }
    let total: f64 = sums.values().sum();
    if total <= 0.0 {
        return Err(Error::contract(
            "total activation is zero; densities are undefined",
        ));
    }
    Ok(sums
        .into_iter()
        .map(|(c, s)| CategoryDensity {
            category: c.to_string(),
            activation: s,
            percent: 100.0 * s / total,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: [usize; 3],
    pub fractions: [f64; 3],
    pub failures: usize,
}

pub fn interp_stats(records: &[InterpRecord]) -> ClassStats {
    let mut counts = [0usize; 3];
    let mut failures = 0;
    for r in records {
        match &r.result {
            Some(res) => counts[res.classification as usize] += 1,
            None => failures += 1,
        }
    }
    let n: usize = counts.iter().sum();
    let fractions = counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 });
    ClassStats {
        counts,
        fractions,
        failures,
    }
}
