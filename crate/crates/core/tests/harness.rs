mod common;

use common::*;
use loralens::harness::{
    read_dump, record, record_mlp_baseline, top_contexts, write_dump, ActivationDump, TokenRef,
};
use loralens::lora::collect_state;
use loralens::microlm::{Corpus, TransformerModel, VOCAB_STRINGS};
use loralens::tensor::Tensor;
use rand::Rng;

fn corpus(seqs: Vec<Vec<usize>>) -> Corpus {
    Corpus::new(seqs, VOCAB_STRINGS.iter().map(|s| s.to_string()).collect())
}

fn random_corpus(seed: u64, n_seq: usize, max_len: usize) -> Corpus {
    let mut r = rng(seed);
    corpus(
        (0..n_seq)
            .map(|_| {
                let len = r.random_range(1..=max_len);
                (0..len).map(|_| r.random_range(0..64)).collect()
            })
            .collect(),
    )
}

#[test]
fn dump_rows_equal_per_sequence_recomputation() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let adapters = random_adapters(&cfg, 1, 0.5);
    let c = corpus(vec![vec![3, 9, 27, 1], vec![5, 5], vec![60, 2, 33, 8]]);
    assert_eq!(c.n_tokens(), 10);
    let dump = record(&model, &adapters, &c).unwrap();
    assert_eq!(dump.activations.shape(), &[10, adapters.len()]);
    let mut row = 0;
    for (s, seq) in c.sequences.iter().enumerate() {
        let state = collect_state(&model, &adapters, seq).unwrap();
        for t in 0..seq.len() {
            assert_eq!(dump.activations.row(row), state.row(t));
            assert_eq!(dump.tokens[row].seq, s);
            assert_eq!(dump.tokens[row].pos, t);
            assert_eq!(dump.tokens[row].tok, VOCAB_STRINGS[seq[t]]);
            row += 1;
        }
    }
}

#[test]
fn dump_matches_straight_line_oracle() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let adapters = random_adapters(&cfg, 2, 0.5);
    let c = random_corpus(3, 6, 9);
    let dump = record(&model, &adapters, &c).unwrap();
    let mut row = 0;
    for seq in &c.sequences {
        let trace = reference_forward(&model, Some(&adapters), seq);
        for t in 0..seq.len() {
            for (j, comp) in adapters.components().iter().enumerate() {
                let s: f64 = comp
                    .a
                    .data()
                    .iter()
                    .zip(&trace.inputs[j][t])
                    .map(|(&a, x)| a as f64 * x)
                    .sum();
                assert!((dump.value(row, j) as f64 - s).abs() < 1e-5 * s.abs().max(1.0));
            }
            row += 1;
        }
    }
}

#[test]
fn zero_adapter_model_gives_zero_dump() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let mut adapters = random_adapters(&cfg, 4, 0.5);
    for c in adapters.components_mut() {
        c.a.data_mut().fill(0.0);
        c.b.data_mut().fill(0.0);
    }
    let dump = record(&model, &adapters, &random_corpus(5, 4, 6)).unwrap();
    assert!(dump.activations.data().iter().all(|&v| v == 0.0));
}

#[test]
fn vocab_mismatch_is_rejected() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let adapters = random_adapters(&cfg, 4, 0.5);
    assert!(record(&model, &adapters, &corpus(vec![vec![1, 64]])).is_err());
}

#[test]
fn mlp_baseline_matches_hidden_state() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let c = random_corpus(6, 5, 8);
    let dump = record_mlp_baseline(&model, &c, 5).unwrap();
    assert_eq!(dump.d(), 5 * cfg.n_layers);
    let mut row = 0;
    for seq in &c.sequences {
        let trace = reference_forward(&model, None, seq);
        for t in 0..seq.len() {
            for layer in 0..cfg.n_layers {
                for j in 0..5 {
                    let want = trace.hidden[layer][t][j];
                    let got = dump.value(row, layer * 5 + j) as f64;
                    assert!((got - want).abs() < 1e-5 * want.abs().max(1.0));
                }
            }
            row += 1;
        }
    }
    assert!(record_mlp_baseline(&model, &c, cfg.d_ff + 1).is_err());
}

fn synthetic_dump(values: Vec<f32>, seq_lens: &[usize]) -> ActivationDump {
    let mut tokens = Vec::new();
    for (s, &n) in seq_lens.iter().enumerate() {
        for p in 0..n {
            tokens.push(TokenRef {
                seq: s,
                pos: p,
                tok: format!("t{s}_{p}"),
            });
        }
    }
    let n = tokens.len();
    let d = values.len() / n;
    ActivationDump::new(
        "adapter_scalar",
        "m".into(),
        None,
        (0..d).map(|j| format!("c{j}")).collect(),
        Tensor::new(vec![n, d], values).unwrap(),
        tokens,
    )
    .unwrap()
}

#[test]
fn top_contexts_match_full_sort_oracle() {
    let mut r = rng(7);
    let lens = [5usize, 9, 3, 12, 7];
    let n: usize = lens.iter().sum();
    for trial in 0..20 {
        // quantized values force plenty of ties
        let values: Vec<f32> = (0..n * 2)
            .map(|_| r.random_range(-4i32..=4) as f32 * 0.5)
            .collect();
        let dump = synthetic_dump(values, &lens);
        for k in [1usize, 4, 10, n] {
            let rec = top_contexts(&dump, trial % 2, k, 2).unwrap();
            let col = dump.column(trial % 2);
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| {
                col[b]
                    .abs()
                    .partial_cmp(&col[a].abs())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            oracle.truncate(k);
            let got: Vec<(usize, usize)> = rec.entries.iter().map(|e| (e.seq, e.pos)).collect();
            let want: Vec<(usize, usize)> = oracle
                .iter()
                .map(|&i| (dump.tokens[i].seq, dump.tokens[i].pos))
                .collect();
            assert_eq!(got, want);
            for e in &rec.entries {
                assert!(e.context.len() <= 5);
                assert!(e
                    .context
                    .iter()
                    .any(|c| c.pos == e.pos && c.act == e.activation));
            }
        }
    }
    let dump = synthetic_dump(vec![1.0; n], &lens);
    let rec = top_contexts(&dump, 0, n + 3, 1).unwrap();
    assert!(rec.truncated);
    assert_eq!(rec.entries.len(), n);
}

#[test]
fn dump_round_trips_bit_identically() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let adapters = random_adapters(&cfg, 8, 0.5);
    let dump = record(&model, &adapters, &random_corpus(9, 7, 10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dump(&dump, dir.path()).unwrap();
    let back = read_dump(dir.path()).unwrap();
    assert_eq!(back.manifest, dump.manifest);
    assert_eq!(back.tokens, dump.tokens);
    let b = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(b(&back.activations), b(&dump.activations));
}
