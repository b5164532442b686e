//! Batch-top-k sparse autoencoder over the concatenated adapter state.
//!
//! Encoding keeps the `B·k` largest positive pre-activations across a whole
//! batch of `B` rows rather than `k` per row, so individual rows may use more
//! or fewer latents than `k`. Inputs are standardized per coordinate before
//! training; `encode_batch`/`decode` operate in that standardized space and
//! [`SaeModel::normalize`]/[`SaeModel::denormalize`] convert.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{ActivationDump, TAP_SAE};
use crate::microlm::Adam;
use crate::tensor::{Element, Graph, Tensor, Var};

pub use checkpoint::{load_sae, save_sae, SAE_FORMAT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    pub d_in: usize,
    pub expansion: usize,
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Minimum firing frequency (fraction of tokens) for a latent to count as alive.
    pub dead_threshold: f64,
    pub normalize: bool,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            d_in: 28,
            expansion: 8,
            k: 16,
            steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            dead_threshold: 1e-5,
            normalize: true,
        }
    }
}

impl SaeConfig {
    pub fn d_latent(&self) -> usize {
        self.d_in * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        if self.expansion < 1 || self.d_in < 1 {
            return Err(Error::contract("SAE needs d_in ≥ 1 and expansion ≥ 1"));
        }
        if self.k < 1 || self.k > self.d_latent() {
            return Err(Error::contract(format!(
                "k = {} must lie in 1..={}",
                self.k,
                self.d_latent()
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Per-coordinate standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Normalization {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Mean and standard deviation of each column; constant columns get std 1.
    pub fn fit(data: &Tensor<f32>) -> Result<Self> {
        let (n, d) = data.dims2()?;
        let mut mean = vec![0.0f64; d];
        for row in data.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0f64; d];
        for row in data.data().chunks(d) {
            for j in 0..d {
                var[j] += (row[j] as f64 - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n.max(1) as f64).sqrt();
                if s > 1e-12 {
                    s as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    pub config: SaeConfig,
    /// `[d_latent, d_in]`
    pub w_enc: Tensor<f32>,
    pub b_enc: Tensor<f32>,
    /// `[d_in, d_latent]`; each column is a latent's decoder direction.
    pub w_dec: Tensor<f32>,
    pub b_dec: Tensor<f32>,
    pub alive: Vec<bool>,
    pub norm: Normalization,
}

/// Indices of the `min(B·k, #positive)` largest positive entries of a
/// row-major `B × L` matrix; ties go to the lower flat index, which is the
/// `(item, latent)` ascending order.
pub fn batch_topk_mask<T: Element>(pre: &[T], batch: usize, k: usize) -> Vec<bool> {
    let mut candidates: Vec<usize> = (0..pre.len()).filter(|&i| pre[i] > T::zero()).collect();
    let budget = (batch * k).min(candidates.len());
    let cmp = |&a: &usize, &b: &usize| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b));
    if budget > 0 && budget < candidates.len() {
        candidates.select_nth_unstable_by(budget - 1, cmp);
    }
    candidates.truncate(budget);
    let mut keep = vec![false; pre.len()];
    for i in candidates {
        keep[i] = true;
    }
    keep
}

/// Graph handles for the four SAE parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct SaeVars {
    pub w_enc: Var,
    pub b_enc: Var,
    pub w_dec: Var,
    pub b_dec: Var,
}

/// Reconstruction MSE of `x` with batch-top-k codes; returns `(loss, pre-activations, keep mask)`.
pub fn objective<T: Element>(
    g: &mut Graph<T>,
    vars: SaeVars,
    x: Var,
    k: usize,
) -> Result<(Var, Var, Vec<bool>)> {
    let (batch, _) = g.value(x).dims2()?;
    let neg_bdec = g.scale(vars.b_dec, -1.0);
    let centered = g.add_bias(x, neg_bdec)?;
    let pre = g.matmul_nt(centered, vars.w_enc)?;
    let pre = g.add_bias(pre, vars.b_enc)?;
    let keep = batch_topk_mask(g.value(pre).data(), batch, k);
    let codes = g.gate(pre, keep.clone())?;
    let recon = g.matmul_nt(codes, vars.w_dec)?;
    let recon = g.add_bias(recon, vars.b_dec)?;
    let loss = g.mse(recon, x)?;
    Ok((loss, pre, keep))
}

impl SaeModel {
    /// Random unit decoder columns, `W_enc = W_decᵀ`, `b_dec` = data mean
    /// (in normalized space), `b_enc = 0`.
    pub fn init(config: SaeConfig, norm: Normalization, data_mean: &[f32]) -> Result<Self> {
        config.validate()?;
        let (d, l) = (config.d_in, config.d_latent());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut w_dec = Tensor::from_fn(vec![d, l], |_| StandardNormal.sample(&mut rng));
        normalize_columns(&mut w_dec);
        let mut w_enc = vec![0.0; l * d];
        for i in 0..d {
            for j in 0..l {
                w_enc[j * d + i] = w_dec.data()[i * l + j];
            }
        }
        Ok(SaeModel {
            w_enc: Tensor::new(vec![l, d], w_enc)?,
            b_enc: Tensor::zeros(vec![l]),
            w_dec,
            b_dec: Tensor::new(vec![d], data_mean.to_vec())?,
            alive: vec![true; l],
            norm,
            config,
        })
    }

    pub fn d_latent(&self) -> usize {
        self.config.d_latent()
    }

    fn check_width(&self, x: &Tensor<f32>, width: usize, op: &'static str) -> Result<usize> {
        let (b, d) = x.dims2()?;
        if d != width {
            return Err(Error::shape(op, x.shape(), &[b, width]));
        }
        if b == 0 {
            return Err(Error::contract(format!("{op} on an empty batch")));
        }
        Ok(b)
    }

    /// Sparse codes `B × d_latent` for standardized inputs `B × d_in`.
    pub fn encode_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let b = self.check_width(x, self.config.d_in, "encode_batch")?;
        let (d, l) = (self.config.d_in, self.d_latent());
        let mut centered = x.data().to_vec();
        for row in centered.chunks_mut(d) {
            for (v, &bd) in row.iter_mut().zip(self.b_dec.data()) {
                *v -= bd;
            }
        }
        let mut pre = vec![0.0f32; b * l];
        f32::gemm(
            b,
            d,
            l,
            &centered,
            false,
            self.w_enc.data(),
            true,
            &mut pre,
            false,
        );
        for row in pre.chunks_mut(l) {
            for (v, &be) in row.iter_mut().zip(self.b_enc.data()) {
                *v += be;
            }
        }
        let keep = batch_topk_mask(&pre, b, self.config.k);
        for (v, k) in pre.iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
        Tensor::new(vec![b, l], pre)
    }

    /// `codes · W_decᵀ + b_dec`, in standardized space.
    pub fn decode(&self, codes: &Tensor<f32>) -> Result<Tensor<f32>> {
        let b = self.check_width(codes, self.d_latent(), "decode")?;
        let (d, l) = (self.config.d_in, self.d_latent());
        let mut out = vec![0.0f32; b * d];
        f32::gemm(
            b,
            l,
            d,
            codes.data(),
            false,
            self.w_dec.data(),
            true,
            &mut out,
            false,
        );
        for row in out.chunks_mut(d) {
            for (v, &bd) in row.iter_mut().zip(self.b_dec.data()) {
                *v += bd;
            }
        }
        Tensor::new(vec![b, d], out)
    }

    pub fn normalize(&self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, d) = raw.dims2()?;
        if d != self.config.d_in {
            return Err(Error::shape("normalize", raw.shape(), &[self.config.d_in]));
        }
        let mut out = raw.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.norm.mean[j]) / self.norm.std[j];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, d) = x.dims2()?;
        if d != self.config.d_in {
            return Err(Error::shape("denormalize", x.shape(), &[self.config.d_in]));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * self.norm.std[j] + self.norm.mean[j];
            }
        }
        Ok(out)
    }

    /// Largest `| ‖column‖ − 1 |` over alive decoder columns.
    pub fn max_column_norm_error(&self) -> f64 {
        column_norms(&self.w_dec)
            .into_iter()
            .zip(&self.alive)
            .filter(|(_, &a)| a)
            .map(|(n, _)| (n - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Latent index of each alive feature, in ascending order; feature ids are
    /// positions in this list.
    pub fn feature_ids(&self) -> Vec<usize> {
        (0..self.alive.len()).filter(|&i| self.alive[i]).collect()
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    fn bind<T: Element>(&self, g: &mut Graph<T>) -> SaeVars {
        let conv = |t: &Tensor<f32>| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| T::from_f32(v).unwrap()).collect(),
            )
            .expect("shape preserved")
        };
        SaeVars {
            w_enc: g.param(conv(&self.w_enc)),
            b_enc: g.param(conv(&self.b_enc)),
            w_dec: g.param(conv(&self.w_dec)),
            b_dec: g.param(conv(&self.b_dec)),
        }
    }
}

fn column_norms(w: &Tensor<f32>) -> Vec<f64> {
    let (d, l) = w.dims2().expect("matrix");
    let mut sq = vec![0.0f64; l];
    for row in w.data().chunks(l).take(d) {
        for (s, &v) in sq.iter_mut().zip(row) {
            *s += (v as f64).powi(2);
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

fn normalize_columns(w: &mut Tensor<f32>) {
    let norms = column_norms(w);
    let (_, l) = w.dims2().expect("matrix");
    for row in w.data_mut().chunks_mut(l) {
        for (v, &n) in row.iter_mut().zip(&norms) {
            if n > 0.0 {
                *v = (*v as f64 / n) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainLog {
    /// Batch reconstruction MSE (standardized space) before each update.
    pub losses: Vec<f32>,
    /// Times each latent was selected across all training batches.
    pub firing_counts: Vec<u64>,
    /// Largest decoder column-norm error after each step's renormalization.
    pub column_norm_error: Vec<f64>,
}

/// Trains on rows of the dump shuffled once per pass.
pub fn train_sae(config: &SaeConfig, dump: &ActivationDump) -> Result<(SaeModel, SaeTrainLog)> {
    config.validate()?;
    if dump.d() != config.d_in {
        return Err(Error::shape("train_sae", &[config.d_in], &[dump.d()]));
    }
    if dump.n_tokens() == 0 {
        return Err(Error::contract("cannot train an SAE on an empty dump"));
    }
    let norm = if config.normalize {
        Normalization::fit(&dump.activations)?
    } else {
        Normalization::identity(config.d_in)
    };
    let d = config.d_in;
    let mut data = dump.activations.clone();
    for row in data.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - norm.mean[j]) / norm.std[j];
        }
    }
    let mean = Normalization::fit(&data)?.mean;
    let mut model = SaeModel::init(config.clone(), norm, &mean)?;

    let n = dump.n_tokens();
    let batch = config.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let sizes = [
        model.w_enc.numel(),
        model.b_enc.numel(),
        model.w_dec.numel(),
        model.b_dec.numel(),
    ];
    let mut adam = Adam::new(config.lr, &sizes);
    let mut log = SaeTrainLog {
        firing_counts: vec![0; model.d_latent()],
        ..SaeTrainLog::default()
    };

    for step in 0..config.steps {
        let mut rows = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            rows.extend_from_slice(data.row(order[cursor]));
            cursor += 1;
        }
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let x = g.constant(Tensor::new(vec![batch, d], rows)?);
        let (loss, _, keep) = objective(&mut g, vars, x, config.k)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                lr: config.lr,
                loss: value,
            });
        }
        let l = model.d_latent();
        for (i, &kept) in keep.iter().enumerate() {
            if kept {
                log.firing_counts[i % l] += 1;
            }
        }
        let mut grads = g.backward(loss)?;
        let owned: Vec<Vec<f32>> = [vars.w_enc, vars.b_enc, vars.w_dec, vars.b_dec]
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect();
        let grad_refs: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
        {
            let mut params: Vec<&mut [f32]> = vec![
                model.w_enc.data_mut(),
                model.b_enc.data_mut(),
                model.w_dec.data_mut(),
                model.b_dec.data_mut(),
            ];
            adam.step(&mut params, &grad_refs);
        }
        normalize_columns(&mut model.w_dec);
        log.losses.push(value);
        log.column_norm_error.push(model.max_column_norm_error());
    }
    Ok((model, log))
}

/// Sparse codes for every dump row, encoded in consecutive batches of
/// `config.batch_size` rows in dump order.
pub fn encode_dump(model: &SaeModel, dump: &ActivationDump) -> Result<Tensor<f32>> {
    if dump.d() != model.config.d_in {
        return Err(Error::shape(
            "encode_dump",
            &[model.config.d_in],
            &[dump.d()],
        ));
    }
    let (n, d, l) = (dump.n_tokens(), model.config.d_in, model.d_latent());
    let x = model.normalize(&dump.activations)?;
    let parts: Vec<Result<Tensor<f32>>> = x
        .data()
        .par_chunks(model.config.batch_size.max(1) * d)
        .map(|chunk| model.encode_batch(&Tensor::new(vec![chunk.len() / d, d], chunk.to_vec())?))
        .collect();
    let mut out = Vec::with_capacity(n * l);
    for part in parts {
        out.extend_from_slice(part?.data());
    }
    Tensor::new(vec![n, l], out)
}

/// Per-latent firing frequency over the dump.
pub fn firing_frequencies(model: &SaeModel, dump: &ActivationDump) -> Result<Vec<f64>> {
    let codes = encode_dump(model, dump)?;
    let l = model.d_latent();
    let mut counts = vec![0u64; l];
    for row in codes.data().chunks(l) {
        for (c, &v) in counts.iter_mut().zip(row) {
            if v > 0.0 {
                *c += 1;
            }
        }
    }
    let n = dump.n_tokens().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Marks a latent alive iff its firing frequency over the dump is at least
/// `dead_threshold`.
pub fn filter_dead(model: &SaeModel, dump: &ActivationDump) -> Result<SaeModel> {
    let freqs = firing_frequencies(model, dump)?;
    let mut out = model.clone();
    out.alive = freqs
        .iter()
        .map(|&f| f >= model.config.dead_threshold)
        .collect();
    Ok(out)
}

/// Feature activations of the alive latents as a dump (one column per feature id).
pub fn feature_dump(
    model: &SaeModel,
    dump: &ActivationDump,
    sae_hash: String,
) -> Result<ActivationDump> {
    let codes = encode_dump(model, dump)?;
    let ids = model.feature_ids();
    let l = model.d_latent();
    let mut data = Vec::with_capacity(dump.n_tokens() * ids.len());
    for row in codes.data().chunks(l) {
        data.extend(ids.iter().map(|&i| row[i]));
    }
    let names = ids
        .iter()
        .enumerate()
        .map(|(f, &latent)| format!("feature.{f}.latent.{latent}"))
        .collect();
    ActivationDump::new(
        TAP_SAE,
        dump.manifest.model_hash.clone(),
        Some(sae_hash),
        names,
        Tensor::new(vec![dump.n_tokens(), ids.len()], data)?,
        dump.tokens.clone(),
    )
}
