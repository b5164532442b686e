//! Toy decoder-only transformer.
//!
//! Every layer carries the seven projection matrices an adapter can target:
//! the attention projections `q`, `k`, `v`, `o` and the gated-MLP projections
//! `gate`, `up`, `down`. Weights are stored `[out, in]` and applied as
//! `x · Wᵀ`. Positions use learned absolute embeddings.

mod checkpoint;
mod synth;
mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

pub use checkpoint::{load_model, save_model, MODEL_FORMAT};
pub use synth::{synth_tasks, synth_tasks_with, Corpus, SynthConfig, VOCAB_STRINGS};
pub use train::{
    evaluate_accuracy, evaluate_loss, train, Adam, TrainConfig, TrainLog, TrainTarget,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(input dim, output dim)` of a projection matrix.
    pub fn matrix_dims(&self, kind: MatrixKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            MatrixKind::Q | MatrixKind::K | MatrixKind::V | MatrixKind::O => (d, d),
            MatrixKind::Gate | MatrixKind::Up => (d, f),
            MatrixKind::Down => (f, d),
        }
    }

    /// Canonical parameter names and shapes, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut specs = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for layer in 0..self.n_layers {
            specs.push((format!("layers.{layer}.attn_norm"), vec![d]));
            for kind in &MatrixKind::ALL[..4] {
                let (i, o) = self.matrix_dims(*kind);
                specs.push((matrix_name(layer, *kind), vec![o, i]));
            }
            specs.push((format!("layers.{layer}.mlp_norm"), vec![d]));
            for kind in &MatrixKind::ALL[4..] {
                let (i, o) = self.matrix_dims(*kind);
                specs.push((matrix_name(layer, *kind), vec![o, i]));
            }
        }
        specs.push(("final_norm".to_string(), vec![d]));
        specs.push(("unembed".to_string(), vec![self.vocab_size, d]));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn n_matrices(&self) -> usize {
        MatrixKind::ALL.len() * self.n_layers
    }
}

/// The seven adaptable projection matrices of a layer, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 7] = [
        MatrixKind::Q,
        MatrixKind::K,
        MatrixKind::V,
        MatrixKind::O,
        MatrixKind::Gate,
        MatrixKind::Up,
        MatrixKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Q => "q",
            MatrixKind::K => "k",
            MatrixKind::V => "v",
            MatrixKind::O => "o",
            MatrixKind::Gate => "gate",
            MatrixKind::Up => "up",
            MatrixKind::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<MatrixKind> {
        MatrixKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, MatrixKind::Gate | MatrixKind::Up | MatrixKind::Down)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn matrix_name(layer: usize, kind: MatrixKind) -> String {
    format!("layers.{layer}.{}", kind.name())
}

// per-layer parameter block: attn_norm q k v o mlp_norm gate up down
const LAYER_BLOCK: usize = 9;

fn layer_offset(kind: MatrixKind) -> usize {
    match kind {
        MatrixKind::Q => 1,
        MatrixKind::K => 2,
        MatrixKind::V => 3,
        MatrixKind::O => 4,
        MatrixKind::Gate => 6,
        MatrixKind::Up => 7,
        MatrixKind::Down => 8,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Tensor<f32>>,
}

impl TransformerModel {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let std = if name.ends_with("norm") {
                    return Tensor::full(shape, 1.0);
                } else if name.ends_with("_emb") {
                    0.5
                } else {
                    let fan_in = shape[1] as f32;
                    let base = 1.0 / fan_in.sqrt();
                    if name.ends_with(".o") || name.ends_with(".down") {
                        base * residual_scale
                    } else {
                        base
                    }
                };
                let normal = Normal::new(0.0f32, std).expect("valid std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            })
            .collect();
        Ok(TransformerModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(TransformerModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    fn matrix_index(&self, layer: usize, kind: MatrixKind) -> usize {
        2 + layer * LAYER_BLOCK + layer_offset(kind)
    }

    /// Projection matrix `[out, in]` addressed by layer and kind.
    pub fn matrix(&self, layer: usize, kind: MatrixKind) -> &Tensor<f32> {
        &self.params[self.matrix_index(layer, kind)]
    }

    pub fn matrix_mut(&mut self, layer: usize, kind: MatrixKind) -> &mut Tensor<f32> {
        let idx = self.matrix_index(layer, kind);
        &mut self.params[idx]
    }

    /// Index set of all projection matrices in the parameter list.
    pub fn matrix_param_indices(&self) -> Vec<usize> {
        (0..self.config.n_layers)
            .flat_map(|l| MatrixKind::ALL.map(|k| self.matrix_index(l, k)))
            .collect()
    }

    /// Places every parameter on the graph, converted to `T`.
    pub fn bind<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::new(
                    p.shape().to_vec(),
                    p.data().iter().map(|&v| T::from_f32(v).unwrap()).collect(),
                )
                .expect("shape preserved");
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundModel { vars }
    }

    /// Inference-only logits for one sequence, `len × vocab`.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        self.logits_with(tokens, &mut NoHook)
    }

    pub fn logits_with(
        &self,
        tokens: &[usize],
        hook: &mut dyn ForwardHook<f32>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, false);
        let out = forward(&mut g, &self.config, &bound, &[tokens], hook)?;
        Ok(g.value(out).clone())
    }
}

/// Model parameters placed on a graph, in canonical order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
}

impl BoundModel {
    fn at(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    fn matrix(&self, layer: usize, kind: MatrixKind) -> Var {
        self.vars[2 + layer * LAYER_BLOCK + layer_offset(kind)]
    }

    fn norm(&self, layer: usize, mlp: bool) -> Var {
        self.vars[2 + layer * LAYER_BLOCK + if mlp { 5 } else { 0 }]
    }
}

/// Interception points in the forward pass.
///
/// `linear` receives the input `x` of a projection and its unadapted output
/// `base = x · Wᵀ`, and returns the value the model continues with.
pub trait ForwardHook<T: Element> {
    fn linear(
        &mut self,
        _g: &mut Graph<T>,
        _layer: usize,
        _kind: MatrixKind,
        _x: Var,
        base: Var,
    ) -> Result<Var> {
        Ok(base)
    }

    /// Called with the gated MLP hidden state `silu(gate) ⊙ up` of each layer.
    fn mlp_hidden(&mut self, _g: &Graph<T>, _layer: usize, _hidden: Var) {}
}

pub struct NoHook;

impl<T: Element> ForwardHook<T> for NoHook {}

fn linear<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    hook: &mut dyn ForwardHook<T>,
    layer: usize,
    kind: MatrixKind,
    x: Var,
) -> Result<Var> {
    let base = g.matmul_nt(x, bound.matrix(layer, kind))?;
    hook.linear(g, layer, kind, x, base)
}

/// Batched forward pass. The rows of the returned `Σlen × vocab` logits follow
/// the sequences in order.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    bound: &BoundModel,
    seqs: &[&[usize]],
    hook: &mut dyn ForwardHook<T>,
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::contract("forward on an empty batch"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.len() > config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence of length {} exceeds max_seq_len {}",
                seq.len(),
                config.max_seq_len
            )));
        }
        if seq.is_empty() {
            return Err(Error::contract("empty sequence"));
        }
        spans.push(ids.len()..ids.len() + seq.len());
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
    }

    let tok = g.embedding(bound.at(0), &ids)?;
    let pos = g.embedding(bound.at(1), &positions)?;
    let mut x = g.add(tok, pos)?;

    let dh = config.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    for layer in 0..config.n_layers {
        let h = g.rms_norm(x, bound.norm(layer, false))?;
        let q = linear(g, bound, hook, layer, MatrixKind::Q, h)?;
        let k = linear(g, bound, hook, layer, MatrixKind::K, h)?;
        let v = linear(g, bound, hook, layer, MatrixKind::V, h)?;

        let mut per_seq = Vec::with_capacity(spans.len());
        for span in &spans {
            let mut heads = Vec::with_capacity(config.n_heads);
            for head in 0..config.n_heads {
                let cols = head * dh..(head + 1) * dh;
                let qh = g.slice(q, span.clone(), cols.clone())?;
                let kh = g.slice(k, span.clone(), cols.clone())?;
                let vh = g.slice(v, span.clone(), cols)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, att_scale);
                let masked = g.causal_mask(scores)?;
                let probs = g.softmax(masked)?;
                heads.push(g.matmul(probs, vh)?);
            }
            per_seq.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            });
        }
        let att = if per_seq.len() == 1 {
            per_seq[0]
        } else {
            g.concat_rows(&per_seq)?
        };
        let o = linear(g, bound, hook, layer, MatrixKind::O, att)?;
        x = g.add(x, o)?;

        let h = g.rms_norm(x, bound.norm(layer, true))?;
        let gate = linear(g, bound, hook, layer, MatrixKind::Gate, h)?;
        let up = linear(g, bound, hook, layer, MatrixKind::Up, h)?;
        let act = g.silu(gate);
        let hidden = g.mul(act, up)?;
        hook.mlp_hidden(g, layer, hidden);
        let down = linear(g, bound, hook, layer, MatrixKind::Down, hidden)?;
        x = g.add(x, down)?;
    }
    let n = bound.vars.len();
    let xf = g.rms_norm(x, bound.at(n - 2))?;
    g.matmul_nt(xf, bound.at(n - 1))
}
