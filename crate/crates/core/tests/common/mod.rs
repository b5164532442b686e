#![allow(dead_code)]

use loralens::lora::{AdapterConfig, AdapterSet};
use loralens::microlm::{MatrixKind, ModelConfig, TransformerModel};
use loralens::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

pub fn normal32(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Entries with magnitude in [0.2, 1.2], away from the kinks of relu and gate.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.2..1.2);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 64,
        max_seq_len: 32,
        seed: 11,
    }
}

/// Adapter set with random `a` and random nonzero `b` on every component.
pub fn random_adapters(cfg: &ModelConfig, seed: u64, b_std: f32) -> AdapterSet {
    let mut set = AdapterSet::new(
        cfg,
        AdapterConfig {
            init_seed: seed,
            ..AdapterConfig::default()
        },
    )
    .unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for c in set.components_mut() {
        for v in c.b.data_mut() {
            let z: f32 = StandardNormal.sample(&mut r);
            *v = b_std * z;
        }
    }
    set
}

// ---------------------------------------------------------------------------
// finite differences

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> loralens::Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn eval_loss(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.value(loss).item().unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` with a small floor for all-zero gradients.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

/// Worst relative error between backprop and central differences over all inputs.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric: Vec<f64> = (0..input.numel())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= FD_STEP;
                (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Scalar `Σ out ⊙ w` with fixed random weights, so every output entry
/// contributes a distinct sensitivity.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> loralens::Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = normal64(&mut rng(seed), &shape);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> loralens::Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// One randomized instance per primitive plus two composites.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut n = |shape: &[usize]| normal64(&mut r, shape);
    let mut cases = vec![
        case("matmul", vec![n(&[3, 4]), n(&[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        }),
        case("matmul_nt", vec![n(&[3, 4]), n(&[5, 4])], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y, 2)
        }),
        case("transpose", vec![n(&[3, 4])], |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 3)
        }),
        case("add", vec![n(&[3, 4]), n(&[3, 4])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 4)
        }),
        case("sub", vec![n(&[3, 4]), n(&[3, 4])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 5)
        }),
        case("mul", vec![n(&[3, 4]), n(&[3, 4])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 6)
        }),
        case("scale", vec![n(&[3, 4])], |g, v| {
            let y = g.scale(v[0], -0.7);
            project(g, y, 7)
        }),
        case("add_bias", vec![n(&[3, 4]), n(&[4])], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 8)
        }),
        case("silu", vec![n(&[3, 4])], |g, v| {
            let y = g.silu(v[0]);
            project(g, y, 9)
        }),
        case("softmax", vec![n(&[3, 5])], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, 11)
        }),
        case("causal_mask", vec![n(&[4, 4])], |g, v| {
            let m = g.causal_mask(v[0])?;
            let y = g.softmax(m)?;
            project(g, y, 12)
        }),
        case("rms_norm", vec![n(&[3, 8]), n(&[8])], |g, v| {
            let y = g.rms_norm(v[0], v[1])?;
            project(g, y, 13)
        }),
        case("cross_entropy", vec![n(&[4, 6])], |g, v| {
            g.cross_entropy(v[0], &[0, 5, 2, 2])
        }),
        case("embedding", vec![n(&[6, 3])], |g, v| {
            let y = g.embedding(v[0], &[0, 2, 2, 5])?;
            project(g, y, 14)
        }),
        case("slice", vec![n(&[4, 5])], |g, v| {
            let y = g.slice(v[0], 1..3, 2..5)?;
            project(g, y, 15)
        }),
        case("concat_rows", vec![n(&[2, 3]), n(&[3, 3])], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            project(g, y, 16)
        }),
        case("concat_cols", vec![n(&[3, 2]), n(&[3, 4])], |g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            project(g, y, 17)
        }),
        case("sum", vec![n(&[3, 4])], |g, v| Ok(g.sum(v[0]))),
        case("mse", vec![n(&[3, 4]), n(&[3, 4])], |g, v| {
            g.mse(v[0], v[1])
        }),
        case(
            "mlp_2layer",
            vec![n(&[5, 4]), n(&[6, 4]), n(&[6]), n(&[3, 6]), n(&[3])],
            |g, v| {
                let h = g.matmul_nt(v[0], v[1])?;
                let h = g.add_bias(h, v[2])?;
                let h = g.silu(h);
                let o = g.matmul_nt(h, v[3])?;
                let o = g.add_bias(o, v[4])?;
                g.cross_entropy(o, &[0, 1, 2, 1, 0])
            },
        ),
    ];
    let mut r = rng(seed ^ 0xabc);
    cases.push(case(
        "relu",
        vec![away_from_zero(&mut r, &[3, 4])],
        |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 10)
        },
    ));
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    cases.push(case(
        "gate",
        vec![normal64(&mut r, &[3, 4])],
        move |g, v| {
            let y = g.gate(v[0], keep.clone())?;
            project(g, y, 18)
        },
    ));
    cases
}

/// SAE objective with `d_in = 4`, `d_latent = 8`, `B = 6`, `k = 2` and all four
/// parameter tensors as inputs.
pub fn sae_objective_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let x = normal64(&mut r, &[6, 4]);
    let inputs = vec![
        normal64(&mut r, &[8, 4]),
        normal64(&mut r, &[8]),
        normal64(&mut r, &[4, 8]),
        normal64(&mut r, &[4]),
    ];
    case("sae_objective", inputs, move |g, v| {
        let xv = g.constant(x.clone());
        let vars = loralens::sae::SaeVars {
            w_enc: v[0],
            b_enc: v[1],
            w_dec: v[2],
            b_dec: v[3],
        };
        Ok(loralens::sae::objective(g, vars, xv, 2)?.0)
    })
}

// ---------------------------------------------------------------------------
// straight-line model

pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

pub struct Trace {
    /// `[token][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// Input of each projection, indexed `[layer * 7 + kind][token]`.
    pub inputs: Vec<Vec<Vec<f64>>>,
    /// Gated MLP hidden state `[layer][token][d_ff]`.
    pub hidden: Vec<Vec<Vec<f64>>>,
}

fn param<'a>(model: &'a TransformerModel, name: &str) -> &'a Tensor<f32> {
    let idx = model
        .param_names()
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    &model.params()[idx]
}

fn rms(x: &[f64], gain: &Tensor<f32>) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter()
        .zip(gain.data())
        .map(|(v, &g)| v * inv * g as f64)
        .collect()
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Plain-loop forward in f64, optionally through rank-1 adapters.
pub fn reference_forward(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    tokens: &[usize],
) -> Trace {
    let cfg = model.config();
    let (d, n) = (cfg.d_model, tokens.len());
    let dh = cfg.head_dim();
    let tok = param(model, "tok_emb");
    let pos = param(model, "pos_emb");
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|j| tok.row(id)[j] as f64 + pos.row(t)[j] as f64)
                .collect()
        })
        .collect();
    let mut inputs = vec![Vec::new(); cfg.n_matrices()];
    let mut hidden = Vec::new();

    let mut lin = |layer: usize, kind: MatrixKind, xs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let idx = layer * 7 + kind.index();
        inputs[idx] = xs.to_vec();
        let w = model.matrix(layer, kind);
        let comp = adapters
            .filter(|s| s.is_active(idx))
            .map(|s| &s.components()[idx]);
        xs.iter()
            .map(|xr| {
                let s = comp.map(|c| {
                    c.a.data()
                        .iter()
                        .zip(xr)
                        .map(|(&a, v)| a as f64 * v)
                        .sum::<f64>()
                });
                (0..w.shape()[0])
                    .map(|i| {
                        let base: f64 = w.row(i).iter().zip(xr).map(|(&wv, v)| wv as f64 * v).sum();
                        match (comp, s) {
                            (Some(c), Some(s)) => base + c.scale as f64 * s * c.b.data()[i] as f64,
                            _ => base,
                        }
                    })
                    .collect()
            })
            .collect()
    };

    for layer in 0..cfg.n_layers {
        let g1 = param(model, &format!("layers.{layer}.attn_norm"));
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, g1)).collect();
        let q = lin(layer, MatrixKind::Q, &h);
        let k = lin(layer, MatrixKind::K, &h);
        let v = lin(layer, MatrixKind::V, &h);
        let mut att = vec![vec![0.0; d]; n];
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|u| {
                        cols.clone().map(|c| q[t][c] * k[u][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    att[t][c] = (0..=t).map(|u| e[u] / z * v[u][c]).sum();
                }
            }
        }
        let o = lin(layer, MatrixKind::O, &att);
        for t in 0..n {
            for j in 0..d {
                x[t][j] += o[t][j];
            }
        }
        let g2 = param(model, &format!("layers.{layer}.mlp_norm"));
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, g2)).collect();
        let gate = lin(layer, MatrixKind::Gate, &h);
        let up = lin(layer, MatrixKind::Up, &h);
        let hid: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(&g, &u)| silu(g) * u).collect())
            .collect();
        let down = lin(layer, MatrixKind::Down, &hid);
        hidden.push(hid);
        for t in 0..n {
            for j in 0..d {
                x[t][j] += down[t][j];
            }
        }
    }
    let gf = param(model, "final_norm");
    let un = param(model, "unembed");
    let logits = x
        .iter()
        .map(|r| {
            let h = rms(r, gf);
            (0..cfg.vocab_size)
                .map(|i| un.row(i).iter().zip(&h).map(|(&w, v)| w as f64 * v).sum())
                .collect()
        })
        .collect();
    Trace {
        logits,
        inputs,
        hidden,
    }
}

// ---------------------------------------------------------------------------
// selection and divergence oracles

/// Flat indices kept by batch-top-k: sort every positive entry by value
/// descending then index, keep the first `min(B·k, #positive)`.
pub fn topk_oracle(pre: &[f64], batch: usize, k: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..pre.len()).filter(|&i| pre[i] > 0.0).collect();
    pos.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b)));
    pos.truncate(batch * k);
    pos.sort_unstable();
    pos
}

/// `Σ p·(ln p − ln q)` from explicit softmax probabilities, summed smallest first.
pub fn kl_oracle(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let probs = |l: &[f32]| -> Vec<f64> {
        let m = l
            .iter()
            .map(|&v| v as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    };
    let (p, q) = (probs(p_logits), probs(q_logits));
    let mut terms: Vec<f64> = p
        .iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .collect();
    terms.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    terms.iter().sum()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Singular values of an `m × n` matrix via the eigenvalues of `MᵀM`.
pub fn singular_values(m: &Tensor<f32>) -> Vec<f64> {
    let (r, c) = m.dims2().unwrap();
    let gram: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            (0..c)
                .map(|j| {
                    (0..r)
                        .map(|k| m.row(k)[i] as f64 * m.row(k)[j] as f64)
                        .sum()
                })
                .collect()
        })
        .collect();
    symmetric_eigenvalues(gram)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Dump over `n` rows grouped into sequences of `seq_len` tokens.
pub fn dump_from(values: Tensor<f32>, seq_len: usize) -> loralens::harness::ActivationDump {
    let (n, d) = values.dims2().unwrap();
    let tokens = (0..n)
        .map(|r| loralens::harness::TokenRef {
            seq: r / seq_len,
            pos: r % seq_len,
            tok: format!("t{}", r % 7),
        })
        .collect();
    loralens::harness::ActivationDump::new(
        loralens::harness::TAP_ADAPTER,
        "model".into(),
        Some("adapters".into()),
        (0..d).map(|j| format!("c{j}")).collect(),
        values,
        tokens,
    )
    .unwrap()
}

/// Low-rank signal plus noise: rows are sparse mixtures of `atoms` directions.
pub fn structured_data(seed: u64, n: usize, d: usize, atoms: usize) -> Tensor<f32> {
    let mut r = rng(seed);
    let dirs = normal32(&mut r, &[atoms, d]);
    let mut out = vec![0.0f32; n * d];
    for row in out.chunks_mut(d) {
        for _ in 0..3 {
            let a = r.random_range(0..atoms);
            let c: f32 = r.random_range(0.5..2.0);
            for (v, &w) in row.iter_mut().zip(dirs.row(a)) {
                *v += c * w;
            }
        }
        for v in row.iter_mut() {
            let z: f32 = StandardNormal.sample(&mut r);
            *v += 0.01 * z;
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

/// Firing frequency of each latent, recomputed from the model's weights with
/// the sort oracle over consecutive batches of `batch_size` rows.
pub fn firing_oracle(model: &loralens::sae::SaeModel, raw: &Tensor<f32>) -> Vec<f64> {
    let x = model.normalize(raw).unwrap();
    let (n, d) = x.dims2().unwrap();
    let l = model.d_latent();
    let mut counts = vec![0usize; l];
    for start in (0..n).step_by(model.config.batch_size) {
        let rows = start..(start + model.config.batch_size).min(n);
        let b = rows.len();
        let mut pre = Vec::with_capacity(b * l);
        for row in rows {
            let xr = x.row(row);
            for j in 0..l {
                let s: f64 = (0..d)
                    .map(|i| model.w_enc.row(j)[i] as f64 * (xr[i] - model.b_dec.data()[i]) as f64)
                    .sum();
                pre.push(s + model.b_enc.data()[j] as f64);
            }
        }
        for idx in topk_oracle(&pre, b, model.config.k) {
            counts[idx % l] += 1;
        }
    }
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

/// `(task, b, ℓ, x, printed %)` for every non-trivial recovery cell.
pub const CELLS: [(&str, f64, f64, f64, f64); 9] = [
    ("aime_lora", 0.2333, 0.6000, 0.5000, 72.73),
    ("math_lora", 0.8340, 0.9220, 0.9100, 86.36),
    ("gpqa_lora", 0.4899, 0.5909, 0.5808, 89.90),
    ("aime_attn", 0.2333, 0.5000, 0.3667, 50.02),
    ("aime_mlp", 0.2333, 0.5000, 0.1333, -37.50),
    ("math_attn", 0.8340, 0.9100, 0.9000, 86.84),
    ("math_mlp", 0.8340, 0.9100, 0.8440, 13.16),
    ("gpqa_attn", 0.4899, 0.5808, 0.5152, 27.83),
    ("gpqa_mlp", 0.4899, 0.5808, 0.5051, 16.72),
];

/// A few-second end-to-end configuration.
pub fn small_run(out: &std::path::Path) -> loralens::pipeline::RunConfig {
    use loralens::microlm::{SynthConfig, TrainConfig};
    let mut cfg = loralens::pipeline::RunConfig {
        out: out.to_path_buf(),
        ..Default::default()
    };
    cfg.model = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    };
    cfg.corpus.synth = SynthConfig {
        n_sequences: 200,
        ..SynthConfig::default()
    };
    cfg.corpus.n_eval = 60;
    let steps = |steps, seed| TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    cfg.pretrain = steps(60, 0);
    cfg.finetune = steps(30, 1);
    cfg.lora = TrainConfig {
        lr: 1e-2,
        ..steps(30, 1)
    };
    cfg.sae.steps = 40;
    cfg.sae.batch_size = 64;
    cfg.sae.expansion = 2;
    cfg.sae.k = 4;
    cfg.maxact.top_k = 8;
    cfg.mlp_baseline.neurons_per_layer = 7;
    cfg.ablation.eval_sequences = 30;
    cfg.interp.endpoint.backoff_ms = 0;
    cfg
}
