//! Activation dumps over a corpus, max-activating contexts, and the raw MLP
//! neuron baseline.
//!
//! A dump is an `n_tokens × d` float32 matrix with one row per `(sequence,
//! position)` in corpus order, plus a token index and a manifest naming each
//! of the `d` directions.

mod dump;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::lora::{collect_state_batch, AdapterSet};
use crate::microlm::{forward, Corpus, ForwardHook, TransformerModel};
use crate::tensor::{Graph, Tensor, Var};

pub use dump::{read_dump, write_dump, DUMP_FORMAT};

pub const TAP_ADAPTER: &str = "adapter_scalar";
pub const TAP_MLP: &str = "mlp_post_silu_gated";
pub const TAP_SAE: &str = "sae_latent";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format: String,
    /// Where the values were read from (`adapter_scalar`, `mlp_post_silu_gated`, `sae_latent`).
    pub tap: String,
    pub model_hash: String,
    pub adapter_hash: Option<String>,
    pub components: Vec<String>,
    pub d: usize,
    pub n_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub seq: usize,
    pub pos: usize,
    pub tok: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub manifest: DumpManifest,
    pub activations: Tensor<f32>,
    pub tokens: Vec<TokenRef>,
}

impl ActivationDump {
    pub fn new(
        tap: &str,
        model_hash: String,
        adapter_hash: Option<String>,
        components: Vec<String>,
        activations: Tensor<f32>,
        tokens: Vec<TokenRef>,
    ) -> Result<Self> {
        let (n, d) = activations.dims2()?;
        if n != tokens.len() {
            return Err(Error::contract(format!(
                "{n} activation rows but {} token entries",
                tokens.len()
            )));
        }
        if d != components.len() {
            return Err(Error::contract(format!(
                "{d} activation columns but {} component names",
                components.len()
            )));
        }
        Ok(ActivationDump {
            manifest: DumpManifest {
                format: DUMP_FORMAT.to_string(),
                tap: tap.to_string(),
                model_hash,
                adapter_hash,
                components,
                d,
                n_tokens: n,
            },
            activations,
            tokens,
        })
    }

    pub fn d(&self) -> usize {
        self.manifest.d
    }

    pub fn n_tokens(&self) -> usize {
        self.manifest.n_tokens
    }

    pub fn value(&self, row: usize, direction: usize) -> f32 {
        self.activations.data()[row * self.d() + direction]
    }

    pub fn column(&self, direction: usize) -> Vec<f32> {
        let d = self.d();
        self.activations
            .data()
            .iter()
            .skip(direction)
            .step_by(d)
            .copied()
            .collect()
    }

    /// Copy restricted to `rows`, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let d = self.d();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= self.n_tokens() {
                return Err(Error::contract(format!("row {r} out of range")));
            }
            data.extend_from_slice(self.activations.row(r));
        }
        let mut manifest = self.manifest.clone();
        manifest.n_tokens = rows.len();
        Ok(ActivationDump {
            manifest,
            activations: Tensor::new(vec![rows.len(), d], data)?,
            tokens: rows.iter().map(|&r| self.tokens[r].clone()).collect(),
        })
    }

    /// Row range of each sequence, indexed by sequence id.
    pub fn sequence_rows(&self) -> Vec<std::ops::Range<usize>> {
        let mut spans: Vec<std::ops::Range<usize>> = Vec::new();
        for (row, t) in self.tokens.iter().enumerate() {
            if t.seq >= spans.len() {
                spans.resize(t.seq + 1, row..row);
                spans[t.seq] = row..row;
            }
            spans[t.seq].end = row + 1;
        }
        spans
    }
}

pub fn model_hash(model: &TransformerModel) -> String {
    let flat: Vec<f32> = model
        .params()
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    io::f32_hash(&flat)
}

pub fn adapter_hash(set: &AdapterSet) -> String {
    let flat: Vec<f32> = set
        .components()
        .iter()
        .flat_map(|c| c.a.data().iter().chain(c.b.data()).copied())
        .collect();
    io::f32_hash(&flat)
}

fn token_index(corpus: &Corpus) -> Vec<TokenRef> {
    corpus
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(seq, ids)| {
            ids.iter().enumerate().map(move |(pos, &id)| TokenRef {
                seq,
                pos,
                tok: corpus.token_str(id).to_string(),
            })
        })
        .collect()
}

const RECORD_CHUNK: usize = 32;

fn check_corpus(model: &TransformerModel, corpus: &Corpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::contract("corpus is empty"));
    }
    corpus.validate(model.config().vocab_size)
}

/// Scalar activation of every adapter component at every corpus token.
pub fn record(
    model: &TransformerModel,
    adapters: &AdapterSet,
    corpus: &Corpus,
) -> Result<ActivationDump> {
    check_corpus(model, corpus)?;
    let chunks: Vec<Result<Vec<Tensor<f32>>>> = corpus
        .sequences
        .par_chunks(RECORD_CHUNK)
        .map(|seqs| {
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            collect_state_batch(model, adapters, &refs)
        })
        .collect();
    let mut data = Vec::with_capacity(corpus.n_tokens() * adapters.len());
    for chunk in chunks {
        for t in chunk? {
            data.extend_from_slice(t.data());
        }
    }
    let activations = Tensor::new(vec![corpus.n_tokens(), adapters.len()], data)?;
    ActivationDump::new(
        TAP_ADAPTER,
        model_hash(model),
        Some(adapter_hash(adapters)),
        adapters.names(),
        activations,
        token_index(corpus),
    )
}

struct MlpTap {
    neurons: usize,
    hidden: Vec<Var>,
}

impl ForwardHook<f32> for MlpTap {
    fn mlp_hidden(&mut self, _g: &Graph<f32>, _layer: usize, hidden: Var) {
        self.hidden.push(hidden);
    }
}

/// First `neurons_per_layer` gated MLP hidden units of every layer of the
/// unadapted model.
pub fn record_mlp_baseline(
    model: &TransformerModel,
    corpus: &Corpus,
    neurons_per_layer: usize,
) -> Result<ActivationDump> {
    let cfg = model.config();
    if neurons_per_layer > cfg.d_ff {
        return Err(Error::contract(format!(
            "{neurons_per_layer} neurons requested but d_ff is {}",
            cfg.d_ff
        )));
    }
    check_corpus(model, corpus)?;
    let d = neurons_per_layer * cfg.n_layers;
    let chunks: Vec<Result<Vec<f32>>> = corpus
        .sequences
        .par_chunks(RECORD_CHUNK)
        .map(|seqs| {
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            let mut g = Graph::<f32>::new();
            let bound = model.bind(&mut g, false);
            let mut tap = MlpTap {
                neurons: neurons_per_layer,
                hidden: Vec::new(),
            };
            forward(&mut g, cfg, &bound, &refs, &mut tap)?;
            let rows: usize = refs.iter().map(|s| s.len()).sum();
            let mut out = Vec::with_capacity(rows * d);
            for r in 0..rows {
                for &h in &tap.hidden {
                    let row = g.value(h).row(r);
                    out.extend_from_slice(&row[..tap.neurons]);
                }
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(corpus.n_tokens() * d);
    for chunk in chunks {
        data.extend(chunk?);
    }
    let names = (0..cfg.n_layers)
        .flat_map(|l| (0..neurons_per_layer).map(move |j| format!("layers.{l}.mlp.{j}")))
        .collect();
    ActivationDump::new(
        TAP_MLP,
        model_hash(model),
        None,
        names,
        Tensor::new(vec![corpus.n_tokens(), d], data)?,
        token_index(corpus),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextToken {
    pub pos: usize,
    pub tok: String,
    pub act: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxActEntry {
    pub seq: usize,
    pub pos: usize,
    pub activation: f32,
    /// Tokens within the window around `pos`, same sequence only.
    pub context: Vec<ContextToken>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxActRecord {
    pub direction: usize,
    pub name: String,
    pub entries: Vec<MaxActEntry>,
    /// Set when fewer tokens exist than were requested.
    pub truncated: bool,
}

impl MaxActRecord {
    pub fn max_abs(&self) -> f32 {
        self.entries
            .iter()
            .flat_map(|e| e.context.iter().map(|c| c.act.abs()))
            .chain(self.entries.iter().map(|e| e.activation.abs()))
            .fold(0.0, f32::max)
    }
}

/// Strongest `k` tokens of a direction by `|activation|`, ties broken by
/// `(sequence, position)` ascending, each with `±window` tokens of context.
pub fn top_contexts(
    dump: &ActivationDump,
    direction: usize,
    k: usize,
    window: usize,
) -> Result<MaxActRecord> {
    if direction >= dump.d() {
        return Err(Error::contract(format!(
            "direction {direction} out of range for {} directions",
            dump.d()
        )));
    }
    let column = dump.column(direction);
    let mut order: Vec<usize> = (0..column.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        column[b].abs().total_cmp(&column[a].abs()).then_with(|| {
            (dump.tokens[a].seq, dump.tokens[a].pos).cmp(&(dump.tokens[b].seq, dump.tokens[b].pos))
        })
    };
    let take = k.min(order.len());
    if take < order.len() && take > 0 {
        order.select_nth_unstable_by(take - 1, cmp);
        order.truncate(take);
    }
    order.sort_by(cmp);
    order.truncate(take);

    let spans = dump.sequence_rows();
    let entries = order
        .into_iter()
        .map(|row| {
            let t = &dump.tokens[row];
            let span = &spans[t.seq];
            let lo = row.saturating_sub(window).max(span.start);
            let hi = (row + window + 1).min(span.end);
            MaxActEntry {
                seq: t.seq,
                pos: t.pos,
                activation: column[row],
                context: (lo..hi)
                    .map(|r| ContextToken {
                        pos: dump.tokens[r].pos,
                        tok: dump.tokens[r].tok.clone(),
                        act: column[r],
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(MaxActRecord {
        direction,
        name: dump.manifest.components[direction].clone(),
        entries,
        truncated: k > dump.n_tokens(),
    })
}

/// Every token of one sequence with its activation on `direction`.
pub fn full_sample(dump: &ActivationDump, direction: usize, seq: usize) -> Vec<ContextToken> {
    let spans = dump.sequence_rows();
    spans
        .get(seq)
        .map(|span| {
            span.clone()
                .map(|r| ContextToken {
                    pos: dump.tokens[r].pos,
                    tok: dump.tokens[r].tok.clone(),
                    act: dump.value(r, direction),
                })
                .collect()
        })
        .unwrap_or_default()
}
