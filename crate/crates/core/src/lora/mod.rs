//! Low-rank adapters on the projection matrices of a [`TransformerModel`].
//!
//! A component adds `scale · b · (aᵀ x)` to the output of its matrix. With
//! rank 1, `a` and `b` are vectors and `s = a · x` is a single scalar per
//! token: the component's activation. Taps record `s` for every component
//! whether or not it is ablated; ablation only removes the contribution.

mod checkpoint;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microlm::{
    forward, matrix_name, ForwardHook, MatrixKind, ModelConfig, TransformerModel,
};
use crate::tensor::{Element, Gradients, Graph, Tensor, Var};

pub use checkpoint::{load_adapters, save_adapters, ADAPTER_FORMAT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Multiplier α applied to every component's contribution.
    pub alpha: f32,
    pub init_seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 1,
            alpha: 2.0,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterComponent {
    pub layer: usize,
    pub kind: MatrixKind,
    /// `lora_A`, shape `[rank, in]`.
    pub a: Tensor<f32>,
    /// `lora_B`, shape `[out, rank]`.
    pub b: Tensor<f32>,
    pub scale: f32,
}

impl AdapterComponent {
    /// Rank-1 component from plain vectors.
    pub fn rank1(layer: usize, kind: MatrixKind, a: Vec<f32>, b: Vec<f32>, scale: f32) -> Self {
        let (n, m) = (a.len(), b.len());
        AdapterComponent {
            layer,
            kind,
            a: Tensor::new(vec![1, n], a).expect("vector shape"),
            b: Tensor::new(vec![m, 1], b).expect("vector shape"),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn name(&self) -> String {
        matrix_name(self.layer, self.kind)
    }

    fn require_rank1(&self) -> Result<()> {
        if self.rank() != 1 {
            return Err(Error::contract(format!(
                "scalar activations need rank 1, {} has rank {}",
                self.name(),
                self.rank()
            )));
        }
        Ok(())
    }
}

/// `(W·x + scale·s·b, s)` with `s = a · x`, for a rank-1 component and a
/// matrix `w` stored `[out, in]`.
pub fn adapted_apply(
    w: &Tensor<f32>,
    comp: &AdapterComponent,
    x: &[f32],
) -> Result<(Vec<f32>, f32)> {
    comp.require_rank1()?;
    let (out, inp) = w.dims2()?;
    if inp != x.len() || inp != comp.in_dim() || out != comp.out_dim() {
        return Err(Error::shape(
            "adapted_apply",
            w.shape(),
            &[comp.out_dim(), comp.in_dim(), x.len()],
        ));
    }
    let s: f64 = comp
        .a
        .data()
        .iter()
        .zip(x)
        .map(|(&a, &v)| a as f64 * v as f64)
        .sum();
    let coeff = comp.scale as f64 * s;
    let y = (0..out)
        .map(|i| {
            let wx: f64 = w
                .row(i)
                .iter()
                .zip(x)
                .map(|(&wv, &xv)| wv as f64 * xv as f64)
                .sum();
            (wx + coeff * comp.b.data()[i] as f64) as f32
        })
        .collect();
    Ok((y, s as f32))
}

/// `W + scale · b · aᵀ`.
pub fn merge(w: &Tensor<f32>, comp: &AdapterComponent) -> Result<Tensor<f32>> {
    let (out, inp) = w.dims2()?;
    if inp != comp.in_dim() || out != comp.out_dim() {
        return Err(Error::shape(
            "merge",
            w.shape(),
            &[comp.out_dim(), comp.in_dim()],
        ));
    }
    let r = comp.rank();
    let (a, b) = (comp.a.data(), comp.b.data());
    let mut merged = w.clone();
    for i in 0..out {
        for j in 0..inp {
            let delta: f32 =
                (0..r).map(|q| b[i * r + q] * a[q * inp + j]).sum::<f32>() * comp.scale;
            if delta != 0.0 {
                merged.data_mut()[i * inp + j] += delta;
            }
        }
    }
    Ok(merged)
}

/// Components switched off for an ablation run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub off: BTreeSet<(usize, MatrixKind)>,
}

impl AblationMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn component(layer: usize, kind: MatrixKind) -> Self {
        AblationMask {
            off: [(layer, kind)].into_iter().collect(),
        }
    }

    pub fn layer(layer: usize) -> Self {
        AblationMask {
            off: MatrixKind::ALL.iter().map(|&k| (layer, k)).collect(),
        }
    }

    pub fn kinds(n_layers: usize, pred: impl Fn(MatrixKind) -> bool) -> Self {
        AblationMask {
            off: (0..n_layers)
                .flat_map(|l| MatrixKind::ALL.into_iter().map(move |k| (l, k)))
                .filter(|&(_, k)| pred(k))
                .collect(),
        }
    }

    pub fn all_mlp(n_layers: usize) -> Self {
        Self::kinds(n_layers, MatrixKind::is_mlp)
    }

    pub fn all_attention(n_layers: usize) -> Self {
        Self::kinds(n_layers, |k| !k.is_mlp())
    }

    pub fn all(n_layers: usize) -> Self {
        Self::kinds(n_layers, |_| true)
    }
}

/// One component per `(layer, kind)`, ordered layer-major with kinds in
/// [`MatrixKind::ALL`] order, plus an on/off flag per component.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    config: AdapterConfig,
    n_layers: usize,
    components: Vec<AdapterComponent>,
    active: Vec<bool>,
}

impl AdapterSet {
    /// `a ~ N(0, 1/√in)`, `b = 0`, so the adapted model starts exactly at the base model.
    pub fn new(model: &ModelConfig, config: AdapterConfig) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::contract("adapter rank must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut components = Vec::with_capacity(model.n_matrices());
        for layer in 0..model.n_layers {
            for kind in MatrixKind::ALL {
                let (inp, out) = model.matrix_dims(kind);
                let normal = Normal::new(0.0f32, 1.0 / (inp as f32).sqrt()).expect("valid std");
                let a = Tensor::from_fn(vec![config.rank, inp], |_| normal.sample(&mut rng));
                let b = Tensor::zeros(vec![out, config.rank]);
                components.push(AdapterComponent {
                    layer,
                    kind,
                    a,
                    b,
                    scale: config.alpha,
                });
            }
        }
        let active = vec![true; components.len()];
        Ok(AdapterSet {
            config,
            n_layers: model.n_layers,
            components,
            active,
        })
    }

    pub fn from_components(
        model: &ModelConfig,
        config: AdapterConfig,
        components: Vec<AdapterComponent>,
    ) -> Result<Self> {
        if components.len() != model.n_matrices() {
            return Err(Error::contract(format!(
                "expected {} components, got {}",
                model.n_matrices(),
                components.len()
            )));
        }
        for (i, c) in components.iter().enumerate() {
            let (layer, kind) = (i / 7, MatrixKind::ALL[i % 7]);
            let (inp, out) = model.matrix_dims(kind);
            if c.layer != layer || c.kind != kind {
                return Err(Error::contract(format!(
                    "component {i} is {} but canonical order expects {}",
                    c.name(),
                    matrix_name(layer, kind)
                )));
            }
            if c.in_dim() != inp || c.out_dim() != out || c.rank() != config.rank {
                return Err(Error::shape(
                    "adapter component",
                    &[config.rank, inp, out],
                    &[c.rank(), c.in_dim(), c.out_dim()],
                ));
            }
        }
        let active = vec![true; components.len()];
        Ok(AdapterSet {
            config,
            n_layers: model.n_layers,
            components,
            active,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[AdapterComponent] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [AdapterComponent] {
        &mut self.components
    }

    pub fn index_of(layer: usize, kind: MatrixKind) -> usize {
        layer * MatrixKind::ALL.len() + kind.index()
    }

    pub fn component(&self, layer: usize, kind: MatrixKind) -> &AdapterComponent {
        &self.components[Self::index_of(layer, kind)]
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.active[idx]
    }

    /// Canonical component names, e.g. `layers.0.q`.
    pub fn names(&self) -> Vec<String> {
        self.components.iter().map(AdapterComponent::name).collect()
    }

    pub fn off_components(&self) -> AblationMask {
        AblationMask {
            off: self
                .components
                .iter()
                .zip(&self.active)
                .filter(|(_, &on)| !on)
                .map(|(c, _)| (c.layer, c.kind))
                .collect(),
        }
    }

    /// Copy of the set with the masked components switched off (in addition
    /// to any already off).
    pub fn apply_mask(&self, mask: &AblationMask) -> Result<AdapterSet> {
        let mut out = self.clone();
        for &(layer, kind) in &mask.off {
            if layer >= self.n_layers {
                return Err(Error::contract(format!(
                    "mask names {} but the model has {} layers",
                    matrix_name(layer, kind),
                    self.n_layers
                )));
            }
            out.active[Self::index_of(layer, kind)] = false;
        }
        Ok(out)
    }

    /// Adapter parameters over base parameters, `Σ r·(in + out) / |θ_base|`.
    pub fn trainable_fraction(&self, model: &ModelConfig) -> f64 {
        self.trainable_param_count() as f64 / model.param_count() as f64
    }

    pub fn trainable_param_count(&self) -> usize {
        self.components
            .iter()
            .map(|c| c.a.numel() + c.b.numel())
            .sum()
    }

    pub(crate) fn trainable_sizes(&self) -> Vec<usize> {
        self.components
            .iter()
            .flat_map(|c| [c.a.numel(), c.b.numel()])
            .collect()
    }

    pub(crate) fn trainable_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.components
            .iter_mut()
            .flat_map(|c| [c.a.data_mut(), c.b.data_mut()])
            .collect()
    }
}

/// Forward hook applying an [`AdapterSet`] and optionally recording each
/// component's activations `x · aᵀ`.
pub struct AdapterHook<'a> {
    set: &'a AdapterSet,
    vars: Vec<(Var, Var)>,
    taps: Vec<Option<Var>>,
}

impl<'a> AdapterHook<'a> {
    fn bind<T: Element>(g: &mut Graph<T>, set: &'a AdapterSet, trainable: bool) -> Self {
        let convert = |t: &Tensor<f32>| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| T::from_f32(v).unwrap()).collect(),
            )
            .expect("shape preserved")
        };
        let vars = set
            .components
            .iter()
            .map(|c| {
                let (a, b) = (convert(&c.a), convert(&c.b));
                if trainable {
                    (g.param(a), g.param(b))
                } else {
                    (g.constant(a), g.constant(b))
                }
            })
            .collect();
        AdapterHook {
            set,
            vars,
            taps: vec![None; set.components.len()],
        }
    }

    pub fn trainable<T: Element>(g: &mut Graph<T>, set: &'a AdapterSet) -> Self {
        Self::bind(g, set, true)
    }

    pub fn frozen<T: Element>(g: &mut Graph<T>, set: &'a AdapterSet) -> Self {
        Self::bind(g, set, false)
    }

    /// Activation node `[tokens, rank]` of each component from the last forward.
    pub fn taps(&self) -> &[Option<Var>] {
        &self.taps
    }

    /// Gradients of `a` and `b` for every component, in trainable order.
    pub fn take_grads<T: Element>(&self, g: &Graph<T>, grads: &mut Gradients<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .map(|v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).numel()])
            })
            .collect()
    }
}

impl<T: Element> ForwardHook<T> for AdapterHook<'_> {
    fn linear(
        &mut self,
        g: &mut Graph<T>,
        layer: usize,
        kind: MatrixKind,
        x: Var,
        base: Var,
    ) -> Result<Var> {
        let idx = AdapterSet::index_of(layer, kind);
        let (a, b) = self.vars[idx];
        let s = g.matmul_nt(x, a)?;
        self.taps[idx] = Some(s);
        let delta = if self.set.active[idx] {
            let d = g.matmul_nt(s, b)?;
            g.scale(d, self.set.components[idx].scale as f64)
        } else {
            // x + (-0.0) == x bit-for-bit for every x, so an ablated component
            // leaves the base output untouched while keeping the same add.
            g.constant(Tensor::full(g.value(base).shape().to_vec(), T::neg_zero()))
        };
        g.add(base, delta)
    }
}

/// Per-token adapter state `[tokens, 7·n_layers]` for one sequence, columns in
/// canonical component order.
pub fn collect_state(
    model: &TransformerModel,
    adapters: &AdapterSet,
    tokens: &[usize],
) -> Result<Tensor<f32>> {
    Ok(collect_state_batch(model, adapters, &[tokens])?.remove(0))
}

/// [`collect_state`] for several sequences in one forward pass.
pub fn collect_state_batch(
    model: &TransformerModel,
    adapters: &AdapterSet,
    seqs: &[&[usize]],
) -> Result<Vec<Tensor<f32>>> {
    if let Some(c) = adapters.components.iter().find(|c| c.rank() != 1) {
        c.require_rank1()?;
    }
    if adapters.n_layers != model.config().n_layers {
        return Err(Error::contract("adapter set does not match model depth"));
    }
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let mut hook = AdapterHook::frozen(&mut g, adapters);
    forward(&mut g, model.config(), &bound, seqs, &mut hook)?;
    let d = adapters.len();
    let cols: Vec<&[f32]> = hook
        .taps
        .iter()
        .map(|t| g.value(t.expect("every component tapped")).data())
        .collect();
    let mut out = Vec::with_capacity(seqs.len());
    let mut row = 0;
    for seq in seqs {
        let n = seq.len();
        let mut data = Vec::with_capacity(n * d);
        for t in 0..n {
            data.extend(cols.iter().map(|c| c[row + t]));
        }
        row += n;
        out.push(Tensor::new(vec![n, d], data)?);
    }
    Ok(out)
}

/// Logits for one sequence through the adapted model.
pub fn adapted_logits(
    model: &TransformerModel,
    adapters: &AdapterSet,
    tokens: &[usize],
) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let mut hook = AdapterHook::frozen(&mut g, adapters);
    let out = forward(&mut g, model.config(), &bound, &[tokens], &mut hook)?;
    Ok(g.value(out).clone())
}

/// Base model with every active component merged into its matrix.
pub fn merge_all(model: &TransformerModel, adapters: &AdapterSet) -> Result<TransformerModel> {
    let mut merged = model.clone();
    for (c, &on) in adapters.components.iter().zip(&adapters.active) {
        if on {
            let w = merge(model.matrix(c.layer, c.kind), c)?;
            *merged.matrix_mut(c.layer, c.kind) = w;
        }
    }
    Ok(merged)
}
