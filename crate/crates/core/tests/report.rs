use std::path::PathBuf;

use loralens::ablation::{KlEntry, KlSweepResult, RecoveryRecord};
use loralens::autointerp::{CategoryDensity, ClassStats, InterpRecord, InterpResult};
use loralens::harness::{ContextToken, MaxActEntry, MaxActRecord};
use loralens::microlm::{matrix_name, MatrixKind};
use loralens::report::{render_feature_page, render_overview, StatsRow};
use quick_xml::events::Event;
use quick_xml::Reader;

/// Parses the page as XML, which also rejects unclosed or mismatched tags.
fn assert_well_formed(html: &str) {
    let mut reader = Reader::from_str(html);
    reader.config_mut().check_end_names = true;
    let mut depth = 0i64;
    loop {
        match reader.read_event() {
            Ok(Event::Start(_)) => depth += 1,
            Ok(Event::End(_)) => depth -= 1,
            Ok(Event::Eof) => break,
            Ok(_) => {}
            Err(e) => panic!("malformed at {}: {e}", reader.buffer_position()),
        }
        assert!(depth >= 0);
    }
    assert_eq!(depth, 0);
}

fn tok(pos: usize, tok: &str, act: f32) -> ContextToken {
    ContextToken {
        pos,
        tok: tok.into(),
        act,
    }
}

fn record() -> MaxActRecord {
    MaxActRecord {
        direction: 2,
        name: "feature.2.latent.17".into(),
        entries: vec![
            MaxActEntry {
                seq: 3,
                pos: 1,
                activation: 4.0,
                context: vec![tok(0, "a", 0.0), tok(1, "<", 4.0), tok(2, "b", -1.0)],
            },
            MaxActEntry {
                seq: 8,
                pos: 0,
                activation: -2.0,
                context: vec![tok(0, "&", -2.0), tok(1, ".", 0.5)],
            },
        ],
        truncated: false,
    }
}

fn interp() -> InterpRecord {
    InterpRecord {
        id: 2,
        name: "feature.2.latent.17".into(),
        dump_hash: "h".into(),
        result: Some(InterpResult {
            explanation: "fires on \"<\" markers".into(),
            classification: 1,
            classification_reasoning: "mostly one token".into(),
        }),
        error: None,
    }
}

fn sample() -> Vec<ContextToken> {
    vec![
        tok(0, "a", 0.2),
        tok(1, "<", 4.0),
        tok(2, "b", -0.3),
        tok(3, ".", 0.0),
    ]
}

fn sweep(n_layers: usize, kl: impl Fn(usize, usize) -> f64) -> KlSweepResult {
    let per_component = (0..n_layers)
        .flat_map(|l| {
            MatrixKind::ALL.into_iter().map({
                let kl = &kl;
                move |k| KlEntry {
                    name: matrix_name(l, k),
                    layer: l,
                    kind: Some(k),
                    kl: kl(l, k.index()),
                }
            })
        })
        .collect();
    let per_layer = (0..n_layers)
        .map(|l| KlEntry {
            name: format!("layers.{l}"),
            layer: l,
            kind: None,
            kl: 0.5,
        })
        .collect();
    KlSweepResult {
        per_component,
        per_layer,
        n_tokens: 99,
        direction: "KL(full || ablated)".into(),
        averaging: "per token".into(),
    }
}

#[test]
fn feature_page_is_well_formed_and_golden() {
    let s = sample();
    let html = render_feature_page(&record(), Some(&interp()), Some((5, &s)));
    assert_well_formed(&html);
    assert!(!html.contains("<script"));
    assert!(!html.contains("src=") && !html.contains("href="));
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/feature_page.html");
    if std::env::var_os("LORALENS_BLESS").is_some() {
        std::fs::write(&path, &html).unwrap();
    }
    assert_eq!(std::fs::read_to_string(&path).unwrap(), html);
}

#[test]
fn highlighted_tokens_carry_signed_values() {
    let html = render_feature_page(&record(), None, None);
    // two nonzero context tokens per entry minus the zero one
    assert_eq!(html.matches("class=\"tok hl pos\"").count(), 2);
    assert_eq!(html.matches("class=\"tok hl neg\"").count(), 2);
    assert!(html.contains("title=\"-1.0000\""));
    assert!(html.contains("title=\"4.0000\""));
    assert!(html.contains("rgba(220,70,40,1.000)"));
    assert!(html.contains("rgba(40,90,220,0.250)"));
}

#[test]
fn full_sample_threshold() {
    let s = sample();
    let html = render_feature_page(&record(), None, Some((5, &s)));
    let right = html.split("class=\"right\"").nth(1).unwrap();
    // 0.2 and -0.3 fall under 10% of the max of 4.0
    assert_eq!(right.matches("tok hl").count(), 1);
}

#[test]
fn rendering_is_pure() {
    let s = sample();
    assert_eq!(
        render_feature_page(&record(), Some(&interp()), Some((5, &s))),
        render_feature_page(&record(), Some(&interp()), Some((5, &s)))
    );
}

#[test]
fn overview_grid_tables_and_well_formedness() {
    let sw = sweep(3, |l, k| 0.01 * (1 + l * 7 + k) as f64);
    let recs = vec![
        RecoveryRecord::new("shift", "full", 0.1, 0.9, 0.9),
        RecoveryRecord::new("shift", "flat", 0.5, 0.5, 0.7),
    ];
    let dens = vec![
        CategoryDensity {
            category: "letters".into(),
            activation: 3.0,
            percent: 75.0,
        },
        CategoryDensity {
            category: "<markers>".into(),
            activation: 1.0,
            percent: 25.0,
        },
    ];
    let stats = ClassStats {
        counts: [2, 1, 1],
        fractions: [0.5, 0.25, 0.25],
        failures: 0,
    };
    let html = render_overview(
        &sw,
        &recs,
        &dens,
        &[StatsRow {
            label: "sae",
            stats: &stats,
            reference_class0: Some(0.62),
        }],
    );
    assert_well_formed(&html);
    assert_eq!(html.matches("<td class=\"kl\"").count(), 7 * 3);
    assert_eq!(html.matches("<td class=\"layer-kl\"").count(), 3);
    assert!(html.contains("<td>75.00%</td>") && html.contains("<td>25.00%</td>"));
    assert!(html.contains("&lt;markers&gt;"));
    assert!(html.contains("100.00%") && html.contains("undefined"));
    assert!(html.contains("62%"));
}

#[test]
fn uniform_grid_renders_uniform_cells() {
    let html = render_overview(&sweep(2, |_, _| 0.3), &[], &[], &[]);
    let styles: std::collections::BTreeSet<&str> = html
        .split("<td class=\"kl\" ")
        .skip(1)
        .map(|s| s.split('>').next().unwrap())
        .collect();
    assert_eq!(styles.len(), 1);
}
