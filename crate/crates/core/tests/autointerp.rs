mod common;

use std::path::PathBuf;

use common::*;
use loralens::autointerp::*;
use loralens::harness::{top_contexts, ContextToken, MaxActEntry, MaxActRecord};
use loralens::tensor::Tensor;
use loralens::Error;
use rand::Rng;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against a checked-in golden file; `LORALENS_BLESS=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("LORALENS_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert!(want == actual, "{name} differs from golden:\n{actual}");
}

fn endpoint() -> EndpointConfig {
    EndpointConfig {
        max_in_flight: 1,
        attempts: 3,
        backoff_ms: 0,
        ..EndpointConfig::default()
    }
}

fn ctx(toks: &[(&str, f32)], start: usize) -> Vec<ContextToken> {
    toks.iter()
        .enumerate()
        .map(|(i, &(tok, act))| ContextToken {
            pos: start + i,
            tok: tok.to_string(),
            act,
        })
        .collect()
}

fn fixed_record() -> MaxActRecord {
    MaxActRecord {
        direction: 3,
        name: "layers.0.k".into(),
        entries: vec![
            MaxActEntry {
                seq: 4,
                pos: 2,
                activation: 2.4,
                context: ctx(
                    &[("c", 0.0), ("a", 0.3), ("b", 2.4), (">", -0.6), ("c", 0.01)],
                    0,
                ),
            },
            MaxActEntry {
                seq: 9,
                pos: 5,
                activation: -1.8,
                context: ctx(&[("d", 0.2), ("b", -1.8), ("<", 0.0), ("b", 1.2)], 4),
            },
            MaxActEntry {
                seq: 1,
                pos: 0,
                activation: 1.2,
                context: ctx(&[("b", 1.2), ("=", 0.0)], 0),
            },
        ],
        truncated: false,
    }
}

fn interp_json(expl: &str, class: u8) -> String {
    format!(
        "{{\"explanation\": \"{expl}\", \"classification\": {class}, \"classification_reasoning\": \"r\"}}"
    )
}

fn category_json(ids: &[&str]) -> String {
    let cats: Vec<String> = ids
        .iter()
        .map(|id| format!("{{\"string_id\": \"{id}\", \"name\": \"{id}\", \"definition\": \"about {id}\", \"examples\": []}}"))
        .collect();
    format!(
        "{{\"categories\": [{}], \"summary\": \"s\"}}",
        cats.join(", ")
    )
}

#[test]
fn templates_are_the_appendix_text() {
    for (file, text) in [
        ("interpret.txt", INTERPRET_TEMPLATE),
        ("categories.txt", CATEGORIES_TEMPLATE),
        ("categorize.txt", CATEGORIZE_TEMPLATE),
    ] {
        assert_eq!(
            std::fs::read_to_string(golden_path(file)).unwrap(),
            text,
            "{file}"
        );
    }
}

#[test]
fn interpret_prompt_golden() {
    check_golden(
        "interpret_prompt.txt",
        &build_interp_prompt(&fixed_record()).unwrap(),
    );
}

#[test]
fn categories_prompt_golden() {
    let expl: Vec<String> = (0..10).map(|i| format!("explanation number {i}")).collect();
    check_golden(
        "categories_prompt.txt",
        &build_categories_prompt(&expl).unwrap(),
    );
}

#[test]
fn categorize_prompt_golden() {
    let set = parse_categories_response(&category_json(&["one", "two", "three", "four", "five"]))
        .unwrap();
    let rec = fixed_record();
    let prompt = build_categorize_prompt("token b", &examples_str(&rec, 5), &set).unwrap();
    check_golden("categorize_prompt.txt", &prompt);
}

#[test]
fn prompts_keep_template_text_outside_slots() {
    let prompt = build_interp_prompt(&fixed_record()).unwrap();
    let (head, rest) = INTERPRET_TEMPLATE.split_once("{activations_str}").unwrap();
    let head = head
        .replace("{{", "{")
        .replace("}}", "}")
        .replace("\\\n", "");
    let tail = rest
        .replace("{{", "{")
        .replace("}}", "}")
        .replace("\\\n", "");
    assert!(prompt.starts_with(&head));
    assert!(prompt.ends_with(&tail));
    assert_eq!(
        &prompt[head.len()..prompt.len() - tail.len()],
        activations_str(&fixed_record())
    );
}

#[test]
fn parsed_result_round_trips() {
    let body = interp_json("token b", 1);
    let client = ScriptedClient::ok([body.clone()]);
    let r = interpret(&fixed_record(), &client, &endpoint()).unwrap();
    assert_eq!(r.explanation, "token b");
    assert_eq!(r.classification, 1);
    let back: InterpResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn classification_three_is_malformed() {
    assert!(matches!(
        parse_interp_response(&interp_json("x", 3)),
        Err(Error::Malformed(_))
    ));
    let client = ScriptedClient::ok(vec![interp_json("x", 3); 3]);
    assert!(matches!(
        interpret(&fixed_record(), &client, &endpoint()),
        Err(Error::Malformed(_))
    ));
    assert_eq!(client.calls(), 3);
}

#[test]
fn category_set_contracts() {
    assert!(parse_categories_response(&category_json(&["a", "b", "c", "d", "e", "f"])).is_ok());
    let nine: Vec<String> = (0..9).map(|i| format!("c{i}")).collect();
    let nine: Vec<&str> = nine.iter().map(String::as_str).collect();
    assert!(parse_categories_response(&category_json(&nine)).is_err());
    assert!(parse_categories_response(&category_json(&["a", "b", "c", "d", "a"])).is_err());
    assert!(
        parse_categories_response(&category_json(&["a", "b", "c", "d", UNCATEGORIZED])).is_err()
    );
}

#[test]
fn categorize_is_strict() {
    let set =
        parse_categories_response(&category_json(&["alpha", "beta", "gamma", "delta", "eps"]))
            .unwrap();
    let echo = ScriptedClient::ok(["alpha"]);
    assert_eq!(
        categorize("e", "x", &set, &echo, &endpoint()).unwrap(),
        "alpha"
    );
    let prose = ScriptedClient::ok(["I think this is alpha.", "Category: beta"]);
    assert_eq!(
        categorize("e", "x", &set, &prose, &endpoint()).unwrap(),
        UNCATEGORIZED
    );
    assert_eq!(prose.calls(), 2);
}

struct Fixture {
    dump: loralens::harness::ActivationDump,
    records: Vec<MaxActRecord>,
}

/// Nonnegative sparse feature activations with a few features silent.
fn fixture() -> Fixture {
    let mut r = rng(21);
    let (n, d) = (400, 12);
    let data = Tensor::from_fn(vec![n, d], |i| {
        let f = i % d;
        if f >= 10 || r.random::<f32>() < 0.7 {
            0.0
        } else {
            r.random_range(0.1f32..3.0) * (1 + f) as f32
        }
    });
    let dump = dump_from(data, 10);
    let records = (0..d)
        .map(|j| top_contexts(&dump, j, 8, 2).unwrap())
        .collect();
    Fixture { dump, records }
}

#[test]
fn scripted_interpret_categorize_density_path() {
    let fx = fixture();
    let ids = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
    // feature 5 answers with an out-of-range class three times and fails
    let mut replies = Vec::new();
    for j in 0..12 {
        let n = if j == 5 { 3 } else { 1 };
        for _ in 0..n {
            replies.push(Ok(interp_json(
                &format!("feature {j}"),
                if j == 5 { 3 } else { (j % 3) as u8 },
            )));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("interp.jsonl");
    let client = ScriptedClient::new(replies);
    let interps = interpret_all(&fx.records, "h", &client, &endpoint(), &cache).unwrap();
    assert_eq!(interps.len(), 12);
    assert!(interps[5].result.is_none() && interps[5].error.is_some());
    let stats = interp_stats(&interps);
    assert_eq!(stats.failures, 1);
    assert_eq!(stats.counts.iter().sum::<usize>(), 11);

    let explanations: Vec<String> = interps
        .iter()
        .filter_map(|i| i.result.as_ref().map(|r| r.explanation.clone()))
        .collect();
    let categories = generate_categories(
        &explanations,
        &ScriptedClient::ok(["not json", &category_json(&ids)]),
        &endpoint(),
    )
    .unwrap();
    assert_eq!(categories.categories.len(), 6);

    // eleven categorize calls; feature 7 answers in prose twice
    let mut answers = Vec::new();
    for j in (0..12).filter(|&j| j != 5) {
        if j == 7 {
            answers.push("It is alpha".to_string());
            answers.push("alpha!".to_string());
        } else {
            answers.push(ids[j % 6].to_string());
        }
    }
    let assignments = categorize_all(
        &interps,
        &fx.records,
        &categories,
        &ScriptedClient::ok(answers),
        &endpoint(),
    )
    .unwrap();
    assert_eq!(assignments[5].category, UNCATEGORIZED);
    assert_eq!(assignments[7].category, UNCATEGORIZED);

    let rows = held_out_rows(&fx.dump, 0.5);
    assert_eq!(rows.len(), 200);
    let dens = category_density(&assignments, &activation_mass(&fx.dump, &rows)).unwrap();
    let total: f64 = dens.iter().map(|d| d.percent).sum();
    assert!((total - 100.0).abs() < 0.01);

    // brute-force per-token accumulation
    let mut oracle = std::collections::BTreeMap::<String, f64>::new();
    for &row in &rows {
        for a in &assignments {
            *oracle.entry(a.category.clone()).or_default() += fx.dump.value(row, a.id) as f64;
        }
    }
    let sum: f64 = oracle.values().sum();
    for d in &dens {
        let want = 100.0 * oracle[&d.category] / sum;
        assert!(
            (d.percent - want).abs() < 1e-9,
            "{}: {} vs {want}",
            d.category,
            d.percent
        );
    }
}

#[test]
fn mock_client_drives_the_whole_path() {
    let fx = fixture();
    let ep = endpoint();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("interp.jsonl");
    let interps = interpret_all(&fx.records, "h", &MockClient, &ep, &cache).unwrap();
    assert!(interps.iter().all(|i| i.result.is_some()));
    let explanations: Vec<String> = interps
        .iter()
        .map(|i| i.result.as_ref().unwrap().explanation.clone())
        .collect();
    let categories = generate_categories(&explanations, &MockClient, &ep).unwrap();
    let assignments = categorize_all(&interps, &fx.records, &categories, &MockClient, &ep).unwrap();
    assert!(assignments.iter().all(|a| categories.contains(&a.category)));
    let dens = category_density(
        &assignments,
        &activation_mass(&fx.dump, &held_out_rows(&fx.dump, 0.2)),
    )
    .unwrap();
    assert!((dens.iter().map(|d| d.percent).sum::<f64>() - 100.0).abs() < 0.01);
}

#[test]
fn warm_cache_makes_no_calls() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("interp.jsonl");
    let first = interpret_all(&fx.records, "h", &MockClient, &endpoint(), &cache).unwrap();
    let silent = ScriptedClient::ok(Vec::<String>::new());
    let second = interpret_all(&fx.records, "h", &silent, &endpoint(), &cache).unwrap();
    assert_eq!(silent.calls(), 0);
    assert_eq!(first, second);
    // a different dump hash invalidates the cache
    let fresh = ScriptedClient::ok(vec![interp_json("x", 0); 12]);
    interpret_all(&fx.records, "other", &fresh, &endpoint(), &cache).unwrap();
    assert_eq!(fresh.calls(), 12);
}

#[test]
fn bounded_concurrency_covers_every_record() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ep = EndpointConfig {
        max_in_flight: 4,
        ..endpoint()
    };
    let out = interpret_all(
        &fx.records,
        "h",
        &MockClient,
        &ep,
        &dir.path().join("c.jsonl"),
    )
    .unwrap();
    let ids: Vec<usize> = out.iter().map(|r| r.id).collect();
    assert_eq!(ids, (0..12).collect::<Vec<_>>());
}
