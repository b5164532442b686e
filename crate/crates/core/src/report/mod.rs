//! Static single-file HTML: per-feature dashboards and the run overview.

use std::fmt::Write;

use crate::ablation::{KlSweepResult, RecoveryRecord};
use crate::autointerp::{CategoryDensity, ClassStats, InterpRecord};
use crate::harness::{ContextToken, MaxActRecord};
use crate::microlm::MatrixKind;

/// Fraction of the record maximum below which full-sample tokens stay plain.
pub const FULL_SAMPLE_THRESHOLD: f32 = 0.1;

const POSITIVE_RGB: &str = "220,70,40";
const NEGATIVE_RGB: &str = "40,90,220";
const KL_RGB: &str = "150,40,160";

const STYLE: &str = "body{font-family:sans-serif;margin:1.5em;color:#222}\
.panels{display:flex;gap:2em}.panels section{flex:1}\
.tok{font-family:monospace;padding:0 2px;margin:0 1px;border-radius:2px}\
.meta{color:#777;font-size:0.8em;margin-right:0.5em}\
li{margin-bottom:0.4em}\
table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:3px 6px;text-align:right}";

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn feature_file(id: usize) -> String {
    format!("feature_{id}.html")
}

pub fn direction_file(layer: usize, kind: MatrixKind) -> String {
    format!("direction_{layer}_{kind}.html")
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\"/>\n\
         <title>{}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n{body}</body>\n</html>\n",
        escape(title)
    )
}

/// A token span; highlighted with opacity `|act| / max_abs` when `lit`.
fn token_span(t: &ContextToken, max_abs: f32, lit: bool) -> String {
    let tok = escape(&t.tok);
    if !lit || t.act == 0.0 || max_abs == 0.0 {
        return format!("<span class=\"tok\" title=\"{:.4}\">{tok}</span>", t.act);
    }
    let (rgb, sign) = if t.act > 0.0 {
        (POSITIVE_RGB, "pos")
    } else {
        (NEGATIVE_RGB, "neg")
    };
    let alpha = (t.act.abs() / max_abs).min(1.0);
    format!(
        "<span class=\"tok hl {sign}\" style=\"background:rgba({rgb},{alpha:.3})\" title=\"{:.4}\">{tok}</span>",
        t.act
    )
}

/// Max-activating contexts on the left; one full sequence on the right with
/// tokens under [`FULL_SAMPLE_THRESHOLD`] of the maximum left plain.
pub fn render_feature_page(
    record: &MaxActRecord,
    interp: Option<&InterpRecord>,
    sample: Option<(usize, &[ContextToken])>,
) -> String {
    let max_abs = record.max_abs();
    let mut body = String::new();
    writeln!(body, "<header>\n<h1>{}</h1>", escape(&record.name)).unwrap();
    match interp.and_then(|i| i.result.as_ref()) {
        Some(r) => {
            writeln!(
                body,
                "<p class=\"explanation\">{}</p>",
                escape(&r.explanation)
            )
            .unwrap();
            writeln!(
                body,
                "<p class=\"class\">class {}: {}</p>",
                r.classification,
                escape(&r.classification_reasoning)
            )
            .unwrap();
        }
        None => {
            let why = interp
                .and_then(|i| i.error.as_deref())
                .unwrap_or("not interpreted");
            writeln!(body, "<p class=\"explanation\">({})</p>", escape(why)).unwrap();
        }
    }
    writeln!(
        body,
        "<p class=\"meta\">max |activation| {max_abs:.4}</p>\n</header>"
    )
    .unwrap();
    body.push_str("<div class=\"panels\">\n<section class=\"left\">\n<h2>Max-activating examples</h2>\n<ol>\n");
    for e in &record.entries {
        write!(
            body,
            "<li><span class=\"meta\">seq {} pos {} act {:.4}</span>",
            e.seq, e.pos, e.activation
        )
        .unwrap();
        for t in &e.context {
            body.push_str(&token_span(t, max_abs, true));
        }
        body.push_str("</li>\n");
    }
    body.push_str("</ol>\n</section>\n<section class=\"right\">\n");
    match sample {
        Some((seq, tokens)) => {
            writeln!(body, "<h2>Full sample (seq {seq})</h2>\n<p>").unwrap();
            for t in tokens {
                let lit = t.act.abs() >= FULL_SAMPLE_THRESHOLD * max_abs;
                body.push_str(&token_span(t, max_abs, lit));
            }
            body.push_str("\n</p>\n");
        }
        None => body.push_str("<h2>Full sample</h2>\n<p>none</p>\n"),
    }
    body.push_str("</section>\n</div>\n");
    page(&record.name, &body)
}

/// Class distribution row for [`render_overview`].
pub struct StatsRow<'a> {
    pub label: &'a str,
    pub stats: &'a ClassStats,
    /// Class-0 fraction observed at full scale, if any.
    pub reference_class0: Option<f64>,
}

/// KL grid (layers × kinds), per-layer KL, group recoveries, category
/// densities and class distributions.
pub fn render_overview(
    sweep: &KlSweepResult,
    recovery: &[RecoveryRecord],
    densities: &[CategoryDensity],
    stats: &[StatsRow<'_>],
) -> String {
    let mut body = String::from("<h1>Adapter analysis</h1>\n");
    let n_layers = sweep.per_layer.len();
    let max_kl = sweep.per_component.iter().map(|e| e.kl).fold(0.0, f64::max);
    writeln!(
        body,
        "<h2>Component ablation KL</h2>\n<p class=\"meta\">{}; {}; {} tokens</p>",
        escape(&sweep.direction),
        escape(&sweep.averaging),
        sweep.n_tokens
    )
    .unwrap();
    body.push_str("<table class=\"kl-grid\">\n<tr><th>layer</th>");
    for k in MatrixKind::ALL {
        write!(body, "<th>{k}</th>").unwrap();
    }
    body.push_str("<th>whole layer</th></tr>\n");
    for layer in 0..n_layers {
        write!(body, "<tr><th>{layer}</th>").unwrap();
        for k in MatrixKind::ALL {
            let kl = sweep.kl(layer, k).unwrap_or(0.0);
            let alpha = if max_kl > 0.0 { kl / max_kl } else { 0.0 };
            write!(
                body,
                "<td class=\"kl\" style=\"background:rgba({KL_RGB},{alpha:.3})\">{kl:.3e}</td>"
            )
            .unwrap();
        }
        let layer_kl = sweep
            .per_layer
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| e.kl);
        writeln!(
            body,
            "<td class=\"layer-kl\">{:.3e}</td></tr>",
            layer_kl.unwrap_or(0.0)
        )
        .unwrap();
    }
    body.push_str("<tr><th>mean</th>");
    for (_, m) in sweep.per_kind_means() {
        write!(body, "<td>{m:.3e}</td>").unwrap();
    }
    body.push_str("<td></td></tr>\n</table>\n");

    if !recovery.is_empty() {
        body.push_str("<h2>Recovery</h2>\n<table class=\"recovery\">\n<tr><th>task</th><th>candidate</th><th>base</th><th>full</th><th>candidate score</th><th>recovery</th></tr>\n");
        for r in recovery {
            let pct = r
                .recovery
                .map(|p| format!("{p:.2}%"))
                .unwrap_or_else(|| "undefined".into());
            writeln!(
                body,
                "<tr><td>{}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{pct}</td></tr>",
                escape(&r.task),
                escape(&r.candidate_name),
                r.base,
                r.full,
                r.candidate
            )
            .unwrap();
        }
        body.push_str("</table>\n");
    }

    body.push_str("<h2>Category activation density</h2>\n");
    if densities.is_empty() {
        body.push_str("<p>none</p>\n");
    } else {
        body.push_str("<table class=\"density\">\n<tr><th>category</th><th>density</th></tr>\n");
        for d in densities {
            writeln!(
                body,
                "<tr><td>{}</td><td>{:.2}%</td></tr>",
                escape(&d.category),
                d.percent
            )
            .unwrap();
        }
        body.push_str("</table>\n");
    }

    body.push_str("<h2>Interpretability classes</h2>\n<table class=\"classes\">\n<tr><th>directions</th><th>class 0</th><th>class 1</th><th>class 2</th><th>failed</th><th>class 0 at full scale</th></tr>\n");
    for row in stats {
        let s = row.stats;
        let reference = row
            .reference_class0
            .map(|r| format!("{:.0}%", r * 100.0))
            .unwrap_or_default();
        writeln!(
            body,
            "<tr><td>{}</td><td>{} ({:.1}%)</td><td>{} ({:.1}%)</td><td>{} ({:.1}%)</td><td>{}</td><td>{reference}</td></tr>",
            escape(row.label),
            s.counts[0],
            s.fractions[0] * 100.0,
            s.counts[1],
            s.fractions[1] * 100.0,
            s.counts[2],
            s.fractions[2] * 100.0,
            s.failures
        )
        .unwrap();
    }
    body.push_str("</table>\n");
    page("Adapter analysis", &body)
}
