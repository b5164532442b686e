//! Component ablations: per-component and per-layer KL sweeps against the
//! unmasked adapter, group ablations and recovery percentages.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::lora::{AblationMask, AdapterHook, AdapterSet};
use crate::microlm::{evaluate_accuracy, forward, Corpus, MatrixKind, TransformerModel};
use crate::tensor::{Graph, Tensor};

const EVAL_CHUNK: usize = 32;

/// `(x − b) / (ℓ − b) × 100`.
pub fn recovery(base: f64, full: f64, candidate: f64) -> Result<f64> {
    if full == base {
        return Err(Error::UndefinedRecovery(base));
    }
    Ok((candidate - base) / (full - base) * 100.0)
}

fn log_softmax(row: &[f32]) -> Result<Vec<f64>> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite logit"));
    }
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max
        + row
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    Ok(row.iter().map(|&v| v as f64 - lse).collect())
}

/// `KL(softmax(p) ‖ softmax(q))` in nats.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::shape(
            "kl_divergence",
            &[p_logits.len()],
            &[q_logits.len()],
        ));
    }
    let lp = log_softmax(p_logits)?;
    let lq = log_softmax(q_logits)?;
    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

/// Logits of every sequence through the adapted model, batched.
pub fn corpus_logits(
    model: &TransformerModel,
    adapters: &AdapterSet,
    corpus: &Corpus,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.sequences.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g, false);
        let mut hook = AdapterHook::frozen(&mut g, adapters);
        let logits = forward(&mut g, model.config(), &bound, &seqs, &mut hook)?;
        let all = g.value(logits);
        let v = all.shape()[1];
        let mut row = 0;
        for s in &seqs {
            let data = all.data()[row * v..(row + s.len()) * v].to_vec();
            out.push(Tensor::new(vec![s.len(), v], data)?);
            row += s.len();
        }
    }
    Ok(out)
}

/// Mean per-token KL of `masked` against reference logits.
fn mean_kl(reference: &[Tensor<f32>], masked: &[Tensor<f32>]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut n = 0;
    for (r, m) in reference.iter().zip(masked) {
        let v = r.shape()[1];
        for (pr, qr) in r.data().chunks(v).zip(m.data().chunks(v)) {
            total += kl_divergence(pr, qr)?;
            n += 1;
        }
    }
    Ok((total / n.max(1) as f64, n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEntry {
    pub name: String,
    pub layer: usize,
    /// `None` for a whole-layer ablation.
    pub kind: Option<MatrixKind>,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSweepResult {
    pub per_component: Vec<KlEntry>,
    pub per_layer: Vec<KlEntry>,
    pub n_tokens: usize,
    pub direction: String,
    pub averaging: String,
}

impl KlSweepResult {
    pub fn len(&self) -> usize {
        self.per_component.len() + self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean KL of each matrix kind across layers, in canonical kind order.
    pub fn per_kind_means(&self) -> Vec<(MatrixKind, f64)> {
        MatrixKind::ALL
            .iter()
            .map(|&k| {
                let vals: Vec<f64> = self
                    .per_component
                    .iter()
                    .filter(|e| e.kind == Some(k))
                    .map(|e| e.kl)
                    .collect();
                (k, vals.iter().sum::<f64>() / vals.len().max(1) as f64)
            })
            .collect()
    }

    pub fn kl(&self, layer: usize, kind: MatrixKind) -> Option<f64> {
        self.per_component
            .iter()
            .find(|e| e.layer == layer && e.kind == Some(kind))
            .map(|e| e.kl)
    }
}

/// Masks each component, then each whole layer, measuring mean per-token
/// `KL(full ‖ ablated)` over every position of `eval`.
pub fn sweep_components(
    model: &TransformerModel,
    adapters: &AdapterSet,
    eval: &Corpus,
) -> Result<KlSweepResult> {
    if eval.is_empty() {
        return Err(Error::contract(
            "ablation sweep needs a non-empty eval corpus",
        ));
    }
    let reference = corpus_logits(model, adapters, eval)?;
    let mut jobs: Vec<(String, usize, Option<MatrixKind>, AblationMask)> = Vec::new();
    for layer in 0..adapters.n_layers() {
        for kind in MatrixKind::ALL {
            let name = crate::microlm::matrix_name(layer, kind);
            jobs.push((
                name,
                layer,
                Some(kind),
                AblationMask::component(layer, kind),
            ));
        }
    }
    for layer in 0..adapters.n_layers() {
        jobs.push((
            format!("layers.{layer}"),
            layer,
            None,
            AblationMask::layer(layer),
        ));
    }
    let results: Vec<Result<(KlEntry, usize)>> = jobs
        .into_par_iter()
        .map(|(name, layer, kind, mask)| {
            let masked = corpus_logits(model, &adapters.apply_mask(&mask)?, eval)?;
            let (kl, n) = mean_kl(&reference, &masked)?;
            Ok((
                KlEntry {
                    name,
                    layer,
                    kind,
                    kl,
                },
                n,
            ))
        })
        .collect();
    let mut per_component = Vec::new();
    let mut per_layer = Vec::new();
    let mut n_tokens = 0;
    for r in results {
        let (entry, n) = r?;
        n_tokens = n;
        if entry.kind.is_some() {
            per_component.push(entry);
        } else {
            per_layer.push(entry);
        }
    }
    Ok(KlSweepResult {
        per_component,
        per_layer,
        n_tokens,
        direction: "KL(full adapter || ablated adapter)".into(),
        averaging: "uniform mean over all token positions of the eval corpus".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub task: String,
    pub candidate_name: String,
    pub base: f64,
    pub full: f64,
    pub candidate: f64,
    /// `None` when `full == base`.
    pub recovery: Option<f64>,
}

impl RecoveryRecord {
    pub fn new(task: &str, candidate_name: &str, base: f64, full: f64, candidate: f64) -> Self {
        RecoveryRecord {
            task: task.to_string(),
            candidate_name: candidate_name.to_string(),
            base,
            full,
            candidate,
            recovery: recovery(base, full, candidate).ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub full: f64,
    pub attn_ablated: f64,
    pub mlp_ablated: f64,
    pub base: f64,
}

/// Exact-match accuracy with the full adapter, without attention adapters,
/// without MLP adapters and without any adapter, plus recovery of each
/// relative to `(base, full)`.
pub fn group_ablation_eval(
    model: &TransformerModel,
    adapters: &AdapterSet,
    task: &str,
    eval: &Corpus,
) -> Result<(GroupScores, Vec<RecoveryRecord>)> {
    let n = adapters.n_layers();
    let score = |mask: AblationMask| -> Result<f64> {
        evaluate_accuracy(model, Some(&adapters.apply_mask(&mask)?), eval)
    };
    let scores = GroupScores {
        full: score(AblationMask::none())?,
        attn_ablated: score(AblationMask::all_attention(n))?,
        mlp_ablated: score(AblationMask::all_mlp(n))?,
        base: score(AblationMask::all(n))?,
    };
    let records = [
        ("full", scores.full),
        ("attn_ablated", scores.attn_ablated),
        ("mlp_ablated", scores.mlp_ablated),
    ]
    .iter()
    .map(|&(name, x)| RecoveryRecord::new(task, name, scores.base, scores.full, x))
    .collect();
    Ok((scores, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub per_component: Vec<KlEntry>,
    pub per_layer: Vec<KlEntry>,
    pub n_tokens: usize,
    pub direction: String,
    pub averaging: String,
    pub eval_sequences: usize,
    pub groups: GroupScores,
    pub recovery: Vec<RecoveryRecord>,
}

impl AblationReport {
    pub fn new(
        sweep: KlSweepResult,
        eval_sequences: usize,
        groups: GroupScores,
        recovery: Vec<RecoveryRecord>,
    ) -> Self {
        AblationReport {
            per_component: sweep.per_component,
            per_layer: sweep.per_layer,
            n_tokens: sweep.n_tokens,
            direction: sweep.direction,
            averaging: sweep.averaging,
            eval_sequences,
            groups,
            recovery,
        }
    }

    pub fn sweep(&self) -> KlSweepResult {
        KlSweepResult {
            per_component: self.per_component.clone(),
            per_layer: self.per_layer.clone(),
            n_tokens: self.n_tokens,
            direction: self.direction.clone(),
            averaging: self.averaging.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}
