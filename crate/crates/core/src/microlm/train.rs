use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward, NoHook, TransformerModel};
use crate::error::{Error, Result};
use crate::lora::{AdapterHook, AdapterSet};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean next-token cross-entropy of each step's batch, in nats.
    pub losses: Vec<f32>,
}

impl TrainLog {
    pub fn first(&self) -> Option<f32> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f32> {
        self.losses.last().copied()
    }
}

pub enum TrainTarget<'a> {
    /// Every base parameter is updated (pretraining, full finetune).
    AllParameters,
    /// Base weights stay frozen; only the adapter vectors move.
    AdapterOnly(&'a mut AdapterSet),
}

/// Adam with constant learning rate and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn split(seq: &[usize]) -> (&[usize], &[usize]) {
    (&seq[..seq.len() - 1], &seq[1..])
}

/// Trains on shuffled minibatches, reshuffling at every pass over the corpus.
pub fn train(
    model: &mut TransformerModel,
    corpus: &super::Corpus,
    config: &TrainConfig,
    target: TrainTarget<'_>,
) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    corpus.validate(model.config().vocab_size)?;
    if corpus.sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::contract("training sequences need at least 2 tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let batch = config.batch_size.clamp(1, corpus.len());

    let mut adapters = match target {
        TrainTarget::AllParameters => None,
        TrainTarget::AdapterOnly(set) => Some(set),
    };
    let sizes: Vec<usize> = match &adapters {
        None => model.params().iter().map(Tensor::numel).collect(),
        Some(set) => set.trainable_sizes(),
    };
    let mut adam = Adam::new(config.lr, &sizes);
    let mut log = TrainLog::default();

    for step in 0..config.steps {
        let mut ids = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            ids.push(order[cursor]);
            cursor += 1;
        }
        let inputs: Vec<&[usize]> = ids.iter().map(|&i| split(&corpus.sequences[i]).0).collect();
        let targets: Vec<usize> = ids
            .iter()
            .flat_map(|&i| split(&corpus.sequences[i]).1.iter().copied())
            .collect();

        let mut g = Graph::<f32>::new();
        let cfg = model.config().clone();
        let loss = match adapters.as_deref() {
            None => {
                let bound = model.bind(&mut g, true);
                let logits = forward(&mut g, &cfg, &bound, &inputs, &mut NoHook)?;
                let loss = g.cross_entropy(logits, &targets)?;
                let value = g.value(loss).item()?;
                check_finite(value, step, config.lr)?;
                let mut grads = g.backward(loss)?;
                let owned: Vec<Vec<f32>> = bound
                    .vars
                    .iter()
                    .map(|&v| {
                        grads
                            .take(v)
                            .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
                    })
                    .collect();
                let grad_refs: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
                let mut params: Vec<&mut [f32]> = model
                    .params_mut()
                    .iter_mut()
                    .map(|p| p.data_mut())
                    .collect();
                adam.step(&mut params, &grad_refs);
                value
            }
            Some(set) => {
                let bound = model.bind(&mut g, false);
                let mut hook = AdapterHook::trainable(&mut g, set);
                let logits = forward(&mut g, &cfg, &bound, &inputs, &mut hook)?;
                let loss = g.cross_entropy(logits, &targets)?;
                let value = g.value(loss).item()?;
                check_finite(value, step, config.lr)?;
                let mut grads = g.backward(loss)?;
                let owned = hook.take_grads(&g, &mut grads);
                let grad_refs: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
                let set = adapters.as_deref_mut().expect("adapter target");
                let mut params = set.trainable_slices_mut();
                adam.step(&mut params, &grad_refs);
                value
            }
        };
        log.losses.push(loss);
    }
    Ok(log)
}

fn check_finite(loss: f32, step: usize, lr: f32) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, lr, loss })
    }
}

const EVAL_CHUNK: usize = 32;

/// Per-sequence `(sum of token NLL, token count, correct answers, answer count)`.
fn eval_chunk(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    seqs: &[Vec<usize>],
    prompt_lens: &[usize],
) -> Result<(f64, usize, usize, usize)> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let inputs: Vec<&[usize]> = seqs.iter().map(|s| split(s).0).collect();
    let logits = match adapters {
        None => forward(&mut g, model.config(), &bound, &inputs, &mut NoHook)?,
        Some(set) => {
            let mut hook = AdapterHook::frozen(&mut g, set);
            forward(&mut g, model.config(), &bound, &inputs, &mut hook)?
        }
    };
    let logits = g.value(logits);
    let (mut nll, mut count, mut correct, mut answers) = (0.0, 0, 0, 0);
    let mut row = 0;
    for (seq, &prompt_len) in seqs.iter().zip(prompt_lens) {
        let targets = split(seq).1;
        for (t, &target) in targets.iter().enumerate() {
            let r = logits.row(row);
            nll -= crate::tensor::log_softmax_at(r, target);
            count += 1;
            // logits at t predict token t + 1
            if t + 1 >= prompt_len {
                answers += 1;
                if argmax(r) == target {
                    correct += 1;
                }
            }
            row += 1;
        }
    }
    Ok((nll, count, correct, answers))
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn eval_totals(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    corpus: &super::Corpus,
) -> Result<(f64, usize, usize, usize)> {
    if corpus.is_empty() {
        return Err(Error::contract("evaluation corpus is empty"));
    }
    corpus.validate(model.config().vocab_size)?;
    let parts: Vec<Result<(f64, usize, usize, usize)>> = corpus
        .sequences
        .par_chunks(EVAL_CHUNK)
        .zip(corpus.prompt_lens.par_chunks(EVAL_CHUNK))
        .map(|(seqs, lens)| eval_chunk(model, adapters, seqs, lens))
        .collect();
    let mut total = (0.0, 0, 0, 0);
    for part in parts {
        let p = part?;
        total.0 += p.0;
        total.1 += p.1;
        total.2 += p.2;
        total.3 += p.3;
    }
    Ok(total)
}

/// Mean next-token cross-entropy over every position of the corpus.
pub fn evaluate_loss(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    corpus: &super::Corpus,
) -> Result<f64> {
    let (nll, count, _, _) = eval_totals(model, adapters, corpus)?;
    Ok(nll / count.max(1) as f64)
}

/// Exact-match next-token accuracy over answer positions (teacher forced).
pub fn evaluate_accuracy(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    corpus: &super::Corpus,
) -> Result<f64> {
    let (_, _, correct, answers) = eval_totals(model, adapters, corpus)?;
    if answers == 0 {
        return Err(Error::contract("corpus has no answer positions"));
    }
    Ok(correct as f64 / answers as f64)
}
